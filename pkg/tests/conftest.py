from __future__ import annotations

import pytest

from volterrafk.condexp import BasisSpec
from volterrafk.grid import make_grid, sample_brownian
from volterrafk.parallel import pin_workers


@pytest.fixture(autouse=True)
def _unpinned_workers(monkeypatch):
    monkeypatch.delenv("VOLTERRA_FK_THREADS", raising=False)
    pin_workers(None)
    yield
    pin_workers(None)


@pytest.fixture
def grid():
    return make_grid(1.0, 8)


@pytest.fixture
def bw(grid):
    return sample_brownian(grid, 4000, 1, seed=11)


@pytest.fixture
def basis():
    return BasisSpec(degree=2, pivots=2)


@pytest.fixture
def out_home(tmp_path, monkeypatch):
    monkeypatch.setenv("VOLTERRA_FK_HOME", str(tmp_path))
    return tmp_path
