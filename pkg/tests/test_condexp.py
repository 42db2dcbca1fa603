from __future__ import annotations

import math

import numpy as np
import pytest

from volterrafk.condexp import BasisSpec, Design, features, fit, project
from volterrafk.errors import ConfigError, ContractError, RegressionError
from volterrafk.families import builtin
from volterrafk.forward import simulate
from volterrafk.grid import sample_brownian


class TestBasisSpec:
    @pytest.mark.parametrize("field", ["degree", "pivots", "ridge"])
    def test_rejects_negative(self, field):
        with pytest.raises(ConfigError, match=field):
            BasisSpec(**{field: -1})

    def test_pivots_are_geometric_and_unique(self):
        assert BasisSpec(pivots=2).pivot_nodes(0, 8) == [1, 8]
        assert BasisSpec(pivots=3).pivot_nodes(0, 8) == [1, 3, 8]
        assert BasisSpec(pivots=4).pivot_nodes(6, 8) == [7, 8], "duplicate offsets must collapse"
        assert BasisSpec(pivots=4).pivot_nodes(8, 8) == []

    @pytest.mark.parametrize(
        "degree,cross,expected",
        [(0, True, 0), (1, True, 3), (2, True, 9), (2, False, 6), (3, True, 12)],
    )
    def test_expanded_column_count(self, degree, cross, expected):
        raw = np.random.default_rng(0).standard_normal((10, 3))
        out = BasisSpec(degree=degree, cross=cross).expand(raw)
        assert out.shape == (10, expected)

    def test_features_read_the_state_at_pivots(self, grid):
        bw = sample_brownian(grid, 20, seed=0)
        fwd = simulate(builtin("state-lipschitz"), grid, bw, 0.1)
        feats = features(BasisSpec(degree=1, pivots=2), fwd, 2)
        assert feats.shape == (20, 3)
        assert np.array_equal(feats[:, 0], fwd.X.values[:, 2])
        assert np.array_equal(feats[:, 2], fwd.Xtilde.get(2, 8))


class TestFit:
    def test_exact_linear_recovery(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((200, 2))
        y = 1.0 + 2.0 * x[:, 0] - 3.0 * x[:, 1]
        res = fit(x, y, ridge=0.0)
        assert np.allclose(res.coef, [2.0, -3.0], atol=1e-10), f"coef {res.coef}"
        assert np.allclose(res.fitted, y, atol=1e-10)
        assert res.method == "cholesky"

    def test_flat_target_is_returned_exactly(self):
        x = np.random.default_rng(2).standard_normal((50, 2))
        res = fit(x, np.full(50, 5.0))
        assert np.all(res.fitted == 5.0), "constant targets must not pick up regression noise"
        assert np.all(res.coef == 0.0)
        assert np.all(res.resid_sd == 0.0)

    def test_mixed_flat_and_live_targets(self):
        x = np.random.default_rng(3).standard_normal((80, 1))
        y = np.column_stack([np.full(80, -1.5), 4.0 * x[:, 0]])
        res = fit(x, y, ridge=0.0)
        assert np.all(res.fitted[:, 0] == -1.5)
        assert np.allclose(res.fitted[:, 1], y[:, 1], atol=1e-10)

    def test_constant_column_is_dropped(self):
        rng = np.random.default_rng(4)
        x = np.column_stack([rng.standard_normal(60), np.full(60, 3.0)])
        res = fit(x, 2.0 * x[:, 0], ridge=0.0)
        assert list(res.keep) == [True, False]
        assert res.coef[1] == 0.0
        assert res.coef[0] == pytest.approx(2.0)

    def test_duplicate_columns_fall_back_to_pinv(self):
        x0 = np.random.default_rng(5).standard_normal(100)
        x = np.column_stack([x0, x0])
        res = fit(x, x0, ridge=0.0)
        assert res.method == "pinv", f"cond={res.cond:.3g} should have triggered the fallback"
        assert np.allclose(res.fitted, x0, atol=1e-8)

    def test_too_few_paths_names_the_cell(self):
        x = np.random.default_rng(6).standard_normal((3, 3))
        with pytest.raises(RegressionError, match=r"parameter i=1, time k=2"):
            fit(x, np.arange(3.0), cell=(1, 2))

    def test_non_finite_features(self):
        x = np.ones((10, 1))
        x[4, 0] = np.nan
        with pytest.raises(RegressionError, match=r"non-finite features \(time k=5\)"):
            fit(x, np.zeros(10), cell=(None, 5))

    def test_target_rows_must_match(self):
        design = Design(np.random.default_rng(7).standard_normal((20, 1)))
        with pytest.raises(ContractError, match="rows"):
            design.solve(np.zeros(19))

    def test_stderr_formula(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((400, 2))
        y = x[:, 0] + rng.standard_normal(400)
        res = fit(x, y)
        assert res.n_params == 3
        assert res.stderr[0] == pytest.approx(math.sqrt(3 / 400) * res.resid_sd[0])

    def test_ridge_shrinks_slopes(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((100, 1))
        y = x[:, 0] + 0.1 * rng.standard_normal(100)
        loose, tight = fit(x, y, ridge=0.0), fit(x, y, ridge=1.0)
        assert abs(tight.coef) < abs(loose.coef)

    def test_residuals_are_orthogonal_to_the_features(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((500, 3))
        y = np.sin(x[:, 0]) + x[:, 1] * x[:, 2] + 0.3 * rng.standard_normal(500)
        res = fit(x, y, ridge=0.0)
        resid = y - res.fitted
        assert abs(resid.mean()) <= 1e-10
        for j in range(x.shape[1]):
            corr = np.corrcoef(resid, x[:, j])[0, 1]
            assert abs(corr) <= 1e-8, f"residual correlates with feature {j}: {corr:.3g}"

    def test_projection_contracts_in_l2(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((300, 2))
        for y in (np.exp(x[:, 0]), 2.0 + x[:, 1] ** 3, rng.standard_normal(300)):
            res = fit(x, y, ridge=0.0)
            assert np.linalg.norm(res.fitted) <= np.linalg.norm(y) * (1.0 + 1e-12)


class TestProject:
    def test_projection_reproduces_fitted_values(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((120, 3))
        y = np.sin(x[:, 0]) + x[:, 1] * x[:, 2]
        res = fit(x, y)
        assert np.allclose(project(res, x), res.fitted, atol=1e-12)

    def test_feature_count_mismatch(self):
        x = np.random.default_rng(11).standard_normal((30, 2))
        res = fit(x, x[:, 0])
        with pytest.raises(ContractError, match="do not match"):
            project(res, x[:, :1])
