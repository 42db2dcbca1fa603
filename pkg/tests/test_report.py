from __future__ import annotations

import json
import math

import numpy as np
import pandas as pd

from volterrafk.config import from_dict
from volterrafk.grid import make_grid
from volterrafk.report import (
    BACKWARD_COLUMNS,
    FORWARD_COLUMNS,
    SCHEMA_VERSION,
    Check,
    backward_table,
    check_at_most,
    check_flag,
    convergence_table,
    forward_table,
    write_report,
    write_tables,
)


class TestChecks:
    def test_at_most(self):
        assert check_at_most("gap", 0.5, 1.0).passed
        assert not check_at_most("gap", 1.5, 1.0).passed
        assert not check_at_most("gap", math.nan, 1.0).passed, "NaN must never pass"

    def test_flag(self):
        assert check_flag("ok", np.bool_(True)).to_dict() == {"name": "ok", "pass": True, "value": 1.0, "tolerance": 1.0}
        assert check_flag("bad", False).value == 0.0


class TestTables:
    def test_forward_table_is_long_format(self):
        g = make_grid(1.0, 4)
        values = np.arange(15.0).reshape(3, 5)
        df = forward_table(g, values, max_paths=2)
        assert list(df.columns) == FORWARD_COLUMNS
        assert len(df) == 2 * 5
        assert df.loc[7, "X"] == 7.0 and df.loc[7, "path"] == 1 and df.loc[7, "k"] == 2

    def test_backward_and_convergence_tables(self, tmp_path):
        g = make_grid(1.0, 2)
        tables = {
            "backward_mean.csv": backward_table(g, np.array([1.0, 2.0, 3.0]), np.zeros(3)),
            "convergence.csv": convergence_table([{"rung": 0, "value": 4, "estimate": 1.0, "error": 0.1}]),
        }
        paths = write_tables(tmp_path, tables)
        assert [p.name for p in paths] == list(tables)
        back = pd.read_csv(tmp_path / "backward_mean.csv")
        assert list(back.columns) == BACKWARD_COLUMNS
        assert back["mean_Y"].tolist() == [1.0, 2.0, 3.0]


class TestReport:
    def test_document_layout(self, tmp_path):
        cfg = from_dict({"subcommand": "solve-bsvie", "coeff": "zero"})
        results = {"Y0": np.float64(1.5), "trace": np.array([1.0, 0.5]), "ok": np.bool_(True), "where": tmp_path}
        p = write_report(tmp_path, cfg, results, [Check("c", True, 0.0, 1.0)], 0.25)
        doc = json.loads(p.read_text())
        assert doc["schema_version"] == SCHEMA_VERSION
        assert doc["subcommand"] == "solve-bsvie"
        assert doc["config_hash"] == cfg.config_hash()
        assert doc["results"] == {"Y0": 1.5, "trace": [1.0, 0.5], "ok": True, "where": str(tmp_path)}
        assert doc["invariant_checks"][0]["pass"] is True
        assert doc["runtime_seconds"] == 0.25
