from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from volterrafk.backward import (
    check_identities,
    compare,
    flow_residual,
    martingale_residual,
    moment_report,
    solve,
    solve_type1,
    solve_type2,
    sweep,
)
from volterrafk.errors import ConfigError, ContractError
from volterrafk.families import builtin
from volterrafk.forward import simulate
from volterrafk.grid import sample_brownian


def _forward(name, grid, bw, x0=0.0, **params):
    coeffs = builtin(name, params or None)
    return coeffs, simulate(coeffs, grid, bw, x0)


class TestExactFamilies:
    @pytest.mark.parametrize("implicit", [False, True])
    def test_zero_family_is_deterministic(self, grid, basis, implicit):
        bw = sample_brownian(grid, 200, seed=3)
        coeffs, fwd = _forward("zero", grid, bw, x0=0.2, f_const=0.5, g_shift=1.0)
        sol = solve_type1(coeffs, fwd, bw, basis, implicit=implicit)
        for k in range(grid.N + 1):
            expected = 1.2 + 0.5 * (grid.N - k) * grid.dt
            assert np.allclose(sol.Y.values[:, k], expected, rtol=1e-12), f"Y at k={k} should be {expected}"
            assert sol.stderrY[k] < 1e-12
        assert np.all(sol.Z.data == 0.0), "a deterministic solution has no Z"

    def test_brownian_terminal_is_a_martingale(self, grid, bw, basis):
        coeffs, fwd = _forward("bm", grid, bw)
        sol = solve_type1(coeffs, fwd, bw, basis)
        W = bw.paths()[:, :, 0]
        for k in range(grid.N + 1):
            rms = float(np.sqrt(np.mean((sol.Y.values[:, k] - W[:, k]) ** 2)))
            assert rms < 0.05, f"E[W_T | F_k] should be W_k, rms gap {rms:.4f} at k={k}"
        for k in range(grid.N):
            z = float(sol.Z.get(k, k).mean())
            assert abs(z - 1.0) < 0.1, f"Z at k={k} averages {z:.3f}, expected 1"


class TestStructure:
    def test_identities_hold_bitwise(self, grid, bw, basis):
        coeffs, fwd = _forward("state-lipschitz", grid, bw)
        sol = solve(coeffs, fwd, bw, basis)
        assert check_identities(sol, fwd, coeffs) == {"diagonal": True, "terminal": True}
        assert sol.params == tuple(range(grid.N + 1))

    def test_driver_type_must_match(self, grid, basis):
        bw = sample_brownian(grid, 100, seed=0)
        c1, f1 = _forward("state-lipschitz", grid, bw)
        c2, f2 = _forward("type2-linear", grid, bw)
        with pytest.raises(ConfigError, match="type-II driver"):
            solve_type1(c2, f2, bw, basis)
        with pytest.raises(ConfigError, match="type-I driver"):
            solve_type2(c1, f1, bw, basis)

    def test_implicit_needs_type1(self, grid):
        bw = sample_brownian(grid, 10, seed=0)
        with pytest.raises(ConfigError, match="implicit"):
            sweep(grid, bw, None, None, None, type2=True, implicit=True)

    def test_mismatched_brownian_batch(self, grid, basis):
        coeffs, fwd = _forward("bm", grid, sample_brownian(grid, 50, seed=0))
        with pytest.raises(ContractError, match="does not match"):
            solve_type1(coeffs, fwd, sample_brownian(grid, 60, seed=0), basis)

    def test_restart_stops_the_sweep(self, grid, basis):
        bw = sample_brownian(grid, 100, seed=1)
        coeffs = builtin("zero", {"f_const": 0.5})
        fwd = simulate(coeffs, grid, bw, 0.0, start=3)
        sol = solve_type1(coeffs, fwd, bw, basis, params=[1])
        assert sol.stop == 3
        assert sol.params == (1, 3, 4, 5, 6, 7, 8)
        mean, se = sol.value_at_stop(1)
        assert mean == pytest.approx(0.5 * 5 * grid.dt)
        assert se == pytest.approx(0.0, abs=1e-12)
        with pytest.raises(ContractError, match="not carried"):
            sol.value_at_stop(0)

    def test_moment_report(self, grid, basis):
        bw = sample_brownian(grid, 50, seed=2)
        coeffs, fwd = _forward("zero", grid, bw, x0=1.0)
        rep = moment_report(solve_type1(coeffs, fwd, bw, basis), fwd.x0)
        assert rep["sup_E_Y2"] == pytest.approx(1.0)
        assert rep["C"] == pytest.approx(0.5)


class TestTypeII:
    def test_martingale_representation(self, grid, bw, basis):
        coeffs, fwd = _forward("type2-linear", grid, bw)
        sol = solve_type2(coeffs, fwd, bw, basis)
        ratio = martingale_residual(sol, bw)
        assert ratio[0] == 0.0
        assert float(ratio.max()) <= 0.1, f"unexplained variance ratios {np.round(ratio, 4)}"

    def test_driver_without_z2_matches_type1(self, grid, bw, basis):
        coeffs, fwd = _forward("state-lipschitz", grid, bw)
        as_type2 = dataclasses.replace(coeffs, meta=dataclasses.replace(coeffs.meta, type2=True))
        one = solve_type1(coeffs, fwd, bw, basis)
        two = solve_type2(as_type2, fwd, bw, basis)
        assert np.array_equal(one.Y.values, two.Y.values)
        assert np.array_equal(one.Ytilde.data, two.Ytilde.data)
        assert np.allclose(one.Z.data, two.Z.data, atol=1e-12)

    def test_deterministic_terminal_has_no_representation_term(self, grid, bw, basis):
        base = builtin("type2-linear", {"a": 0.0, "c": 0.0, "e": 0.0})
        coeffs = dataclasses.replace(base, g=lambda t, x: np.full(x.shape[0], 1.0 + t))
        fwd = simulate(coeffs, grid, bw, 0.0)
        sol = solve_type2(coeffs, fwd, bw, basis)
        assert np.allclose(sol.Y.values, 1.0 + grid.nodes[None, :], rtol=1e-12)
        assert np.allclose(sol.Z2.data, 0.0, atol=1e-12), "Y is deterministic, so Z2 must vanish"

    def test_type1_has_no_representation(self, grid, basis):
        bw = sample_brownian(grid, 100, seed=0)
        coeffs, fwd = _forward("bm", grid, bw)
        with pytest.raises(ContractError, match="type-II"):
            martingale_residual(solve_type1(coeffs, fwd, bw, basis), bw)


class TestFlow:
    @pytest.mark.parametrize("implicit", [False, True])
    def test_flow_residual_is_centred(self, grid, bw, basis, implicit):
        coeffs, fwd = _forward("state-lipschitz", grid, bw)
        sol = solve_type1(coeffs, fwd, bw, basis, implicit=implicit)
        res = flow_residual(sol, fwd, bw, coeffs, 0, grid.N // 2)
        assert abs(res["z"]) <= 4.0, f"flow gap {res['mean']:.4g} is {res['z']:.2f} standard errors"

    def test_flow_indices_are_checked(self, grid, basis):
        bw = sample_brownian(grid, 50, seed=0)
        coeffs, fwd = _forward("zero", grid, bw)
        sol = solve_type1(coeffs, fwd, bw, basis)
        with pytest.raises(ContractError, match="flow residual"):
            flow_residual(sol, fwd, bw, coeffs, 5, 2)

    def test_implicit_stays_close_to_explicit(self, grid, bw, basis):
        coeffs, fwd = _forward("state-lipschitz", grid, bw)
        explicit = solve_type1(coeffs, fwd, bw, basis)
        implicit = solve_type1(coeffs, fwd, bw, basis, implicit=True)
        assert implicit.implicit and not explicit.implicit
        assert abs(implicit.meanY[0] - explicit.meanY[0]) < 0.05


class TestComparison:
    def test_ordered_data_gives_ordered_solutions(self, grid, bw, basis):
        _, fwd = _forward("state-lipschitz", grid, bw)
        lower = builtin("state-lipschitz")
        upper = builtin("state-lipschitz", {"f_const": 0.2, "g_shift": 1.0})
        rep = compare(lower, upper, fwd, bw, basis)
        assert rep.certified, f"hypotheses {rep.hypotheses}"
        assert rep.violations == 0 and rep.max_gap == 0.0
        assert np.all(rep.mean_diff[fwd.start:] > 0.0)
        assert rep.to_dict()["n_cells"] == bw.n_paths * (grid.N + 1)

    def test_unordered_terminals_are_not_certified(self, grid, basis):
        bw = sample_brownian(grid, 200, seed=5)
        _, fwd = _forward("state-lipschitz", grid, bw)
        rep = compare(builtin("state-lipschitz", {"g_shift": 1.0}), builtin("state-lipschitz"), fwd, bw, basis)
        assert not rep.hypotheses["g_ordered"]
        assert not rep.certified
        assert rep.violations > 0
