from __future__ import annotations

import math

import numpy as np
import pytest

from volterrafk.backward import solve_type1
from volterrafk.config import MonteCarloConfig
from volterrafk.errors import BudgetError, ConfigError, ContractError, NumericalError
from volterrafk.families import builtin
from volterrafk.forward import simulate
from volterrafk.grid import make_grid, sample_brownian
from volterrafk.ppde import (
    CoupledResult,
    coupled_residual,
    eval_U,
    fk_check,
    nested_cells,
    past_node_gap,
    path_derivative,
    solve_coupled,
    z_representation,
)


def _mc(paths=400, seed=1, **kw):
    return MonteCarloConfig(paths=paths, seed=seed, **kw)


class TestEvalU:
    def test_zero_family_is_exact(self, grid, basis):
        coeffs = builtin("zero", {"f_const": 0.5, "g_shift": 1.0})
        x = np.linspace(0.0, 1.0, grid.N + 1)
        u = eval_U(coeffs, grid, 1, 3, x, _mc(50), basis)
        assert u.estimate == pytest.approx(1.0 + 1.0 + 0.5 * 5 * grid.dt)
        assert u.stderr == pytest.approx(0.0, abs=1e-12)
        assert (u.t_idx, u.s_idx, u.n_paths) == (1, 3, 50)

    def test_terminal_time_reads_g(self, grid, basis):
        coeffs = builtin("bm", {"g_scale": 2.0})
        x = np.full(grid.N + 1, 0.25)
        u = eval_U(coeffs, grid, 2, grid.N, x, _mc(), basis)
        assert u.estimate == 0.5 and u.stderr == 0.0 and u.n_paths == 0

    def test_brownian_restart_keeps_the_level(self, grid, basis):
        x = np.full(grid.N + 1, 0.3)
        u = eval_U(builtin("bm"), grid, 2, 4, x, _mc(4000), basis)
        # sd of the mean of W_T - W_s over 4000 paths is about 0.014
        assert abs(u.estimate - 0.3) < 0.06, f"U = {u.estimate:.4f}"
        assert u.to_dict()["n_paths"] == 4000

    def test_nodes_before_s_are_ignored(self, grid, basis):
        coeffs = builtin("state-lipschitz")
        x = np.linspace(-0.5, 0.5, grid.N + 1)
        u = eval_U(coeffs, grid, 1, 3, x, _mc(500), basis)
        moved = x.copy()
        moved[:3] -= 2.0
        again = eval_U(coeffs, grid, 1, 3, moved, _mc(500), basis)
        assert again.estimate == pytest.approx(u.estimate, abs=1e-12 * (1.0 + abs(u.estimate)))
        assert past_node_gap(coeffs, grid, u, _mc(500), basis, shift=0.7) <= 1e-12 * (1.0 + abs(u.estimate))

    def test_restart_node_enters_the_coefficients(self, grid, basis):
        coeffs = builtin("state-lipschitz")
        x = np.zeros(grid.N + 1)
        u = eval_U(coeffs, grid, 1, 3, x, _mc(500), basis)
        moved = x.copy()
        moved[3] = 0.7
        assert abs(eval_U(coeffs, grid, 1, 3, moved, _mc(500), basis).estimate - u.estimate) > 1e-3

    def test_nodes_after_s_are_free_terms(self, grid, basis):
        coeffs = builtin("bm")
        x = np.full(grid.N + 1, 0.3)
        u = eval_U(coeffs, grid, 1, 3, x, _mc(500), basis).estimate
        tail = x.copy()
        tail[4:] += 0.5
        assert eval_U(coeffs, grid, 1, 3, tail, _mc(500), basis).estimate - u == pytest.approx(0.5, abs=1e-9)
        interior = x.copy()
        interior[4:-1] += 0.5
        assert eval_U(coeffs, grid, 1, 3, interior, _mc(500), basis).estimate == pytest.approx(u, abs=1e-9), (
            "g reads only the terminal node"
        )

    def test_past_node_gap_at_the_origin(self, grid, basis):
        coeffs = builtin("state-lipschitz")
        u = eval_U(coeffs, grid, 0, 0, np.zeros(grid.N + 1), _mc(50), basis)
        assert past_node_gap(coeffs, grid, u, _mc(50), basis) == 0.0

    def test_point_checks(self, grid, basis):
        coeffs = builtin("zero")
        with pytest.raises(ConfigError, match="t <= s"):
            eval_U(coeffs, grid, 4, 2, np.zeros(grid.N + 1), _mc(), basis)
        with pytest.raises(ConfigError, match="nodes"):
            eval_U(coeffs, grid, 0, 2, np.zeros(grid.N), _mc(), basis)
        with pytest.raises(ContractError, match="outside grid range"):
            eval_U(coeffs, grid, 0, grid.N + 1, np.zeros(grid.N + 1), _mc(), basis)


class TestFKCheck:
    def _global(self, grid, basis, name="zero", n=100, **params):
        coeffs = builtin(name, params or None)
        bw = sample_brownian(grid, n, coeffs.d, seed=7)
        fwd = simulate(coeffs, grid, bw, 0.2)
        return coeffs, fwd, solve_type1(coeffs, fwd, bw, basis)

    def test_zero_family_has_no_discrepancy(self, grid, basis):
        coeffs, fwd, bwd = self._global(grid, basis, f_const=0.3)
        rep = fk_check(coeffs, fwd, bwd, [(0, 0), (5, 3), (9, grid.N)], _mc(40), basis)
        assert rep.passed
        assert rep.max_discrepancy <= 1e-12, f"rows {rep.rows}"
        assert [r["i"] for r in rep.rows] == [0, 3, grid.N]

    def test_budget_is_enforced(self, grid, basis):
        coeffs, fwd, bwd = self._global(grid, basis)
        mc = _mc(100, budget=10)
        with pytest.raises(BudgetError, match="budget is 10"):
            fk_check(coeffs, fwd, bwd, [(0, 1)], mc, basis)

    def test_sample_path_is_checked(self, grid, basis):
        coeffs, fwd, bwd = self._global(grid, basis)
        with pytest.raises(ContractError, match="sample path"):
            fk_check(coeffs, fwd, bwd, [(500, 1)], _mc(), basis)

    def test_nested_cells(self):
        assert nested_cells(2, 10, 4) == 2 * 10 * 15

    @pytest.mark.slow
    def test_discrepancy_shrinks_like_one_over_root_n(self, basis):
        g = make_grid(1.0, 4)
        coeffs = builtin("bm")
        bw = sample_brownian(g, 100_000, seed=21)
        fwd = simulate(coeffs, g, bw, 0.0)
        bwd = solve_type1(coeffs, fwd, bw, basis)
        rng = np.random.default_rng(22)
        sample = [(int(p), int(i)) for p, i in zip(rng.integers(0, bw.n_paths, 200), rng.integers(0, g.N, 200))]
        ladder = [16, 64, 256, 1024]
        gaps = [fk_check(coeffs, fwd, bwd, sample, _mc(n, seed=30 + n), basis).mean_discrepancy for n in ladder]
        slope = np.polyfit(np.log(ladder), np.log(gaps), 1)[0]
        assert -0.6 <= slope <= -0.4, f"slope {slope:.3f}, mean discrepancies {gaps}"

    @pytest.mark.slow
    def test_state_lipschitz_within_error_bars(self, basis):
        g = make_grid(1.0, 8)
        coeffs = builtin("state-lipschitz")
        bw = sample_brownian(g, 8000, seed=12)
        fwd = simulate(coeffs, g, bw, 0.0)
        bwd = solve_type1(coeffs, fwd, bw, basis)
        rep = fk_check(coeffs, fwd, bwd, [(3, 2), (11, 4), (40, 6)], _mc(8000), basis, sigmas=4.0)
        assert rep.passed, f"rows {rep.rows}"


class TestPathDerivative:
    def test_brownian_derivative_is_the_terminal_direction(self, grid, basis):
        x = np.full(grid.N + 1, 0.3)
        eta = np.linspace(1.0, 2.0, grid.N + 1)
        est = path_derivative(builtin("bm"), None, grid, 1, 2, x, eta, _mc(2000), basis)
        for name in ("variational", "finite_difference", "resolvent"):
            assert getattr(est, name) == pytest.approx(2.0, rel=1e-6), f"{name} = {getattr(est, name)}"
        assert np.all(est.eta[:2] == 0.0), "direction must vanish before s"
        assert max(est.discrepancies.values()) < 1e-6

    def test_terminal_slice_uses_g(self, grid, basis):
        x = np.zeros(grid.N + 1)
        eta = np.ones(grid.N + 1)
        est = path_derivative(builtin("state-lipschitz"), None, grid, 0, grid.N, x, eta, _mc(50), basis)
        assert est.finite_difference == pytest.approx(1.0, rel=1e-6), "d/dx sin(x) at 0 is 1"
        assert est.variational == pytest.approx(1.0, rel=1e-12)

    def test_direction_length(self, grid, basis):
        with pytest.raises(ConfigError, match="direction"):
            path_derivative(builtin("bm"), None, grid, 0, 1, np.zeros(grid.N + 1), np.ones(3), _mc(), basis)

    def test_type2_is_rejected(self, grid, basis):
        x = np.zeros(grid.N + 1)
        with pytest.raises(ContractError, match="type-I"):
            path_derivative(builtin("type2-linear"), None, grid, 0, 1, x, x + 1.0, _mc(), basis)

    def test_underflowing_step(self, grid, basis):
        x = np.full(grid.N + 1, 1.0e20)
        with pytest.raises(NumericalError, match="underflows"):
            path_derivative(builtin("bm"), None, grid, 0, 1, x, np.ones(grid.N + 1), _mc(), basis, eps=1e-10)

    def test_variational_estimator_is_linear_in_the_direction(self, grid, basis):
        x = np.full(grid.N + 1, 0.2)
        eta = np.linspace(1.0, 2.0, grid.N + 1)
        est = path_derivative(builtin("state-lipschitz"), None, grid, 1, 2, x, eta, _mc(1000, seed=5), basis)
        scale = 1e-10 * (1.0 + abs(est.variational))
        assert est.additivity_gap <= scale and est.homogeneity_gap <= scale, est.to_dict()
        doc = est.to_dict()
        assert doc["additivity_gap"] == est.additivity_gap and doc["homogeneity_gap"] == est.homogeneity_gap

    def test_zero_direction(self, grid, basis):
        x = np.full(grid.N + 1, 0.2)
        est = path_derivative(builtin("state-lipschitz"), None, grid, 1, 2, x, np.zeros(grid.N + 1), _mc(200), basis)
        assert est.variational == 0.0 and est.resolvent == 0.0 and est.finite_difference == 0.0

    @pytest.mark.slow
    def test_estimators_agree_on_a_nonlinear_family(self, basis):
        g = make_grid(1.0, 8)
        x = np.full(g.N + 1, 0.2)
        eta = np.ones(g.N + 1)
        est = path_derivative(builtin("state-lipschitz"), None, g, 1, 2, x, eta, _mc(100_000, seed=3), basis)
        pairs = {
            "variational_vs_fd": (est.variational, est.variational_se, est.finite_difference, est.fd_se),
            "variational_vs_resolvent": (est.variational, est.variational_se, est.resolvent, est.resolvent_se),
            "fd_vs_resolvent": (est.finite_difference, est.fd_se, est.resolvent, est.resolvent_se),
        }
        for name, (a, sa, b, sb) in pairs.items():
            agree = est.discrepancies[name] <= 0.01 or abs(a - b) <= 3.0 * math.hypot(sa, sb)
            assert agree, f"{name}: {est.to_dict()}"
        assert est.richardson_ok, est.to_dict()


class TestZRepresentation:
    def test_brownian_derivative_is_one(self, grid, bw, basis):
        coeffs = builtin("bm")
        fwd = simulate(coeffs, grid, bw)
        bwd = solve_type1(coeffs, fwd, bw, basis)
        rows = z_representation(coeffs, None, fwd, bwd, 1, 3, [0, 1], _mc(200), basis)
        assert [r["path"] for r in rows] == [0, 1]
        assert all(r["derivative"] == pytest.approx(1.0, rel=1e-12) for r in rows)

    def test_index_range(self, grid, bw, basis):
        coeffs = builtin("bm")
        fwd = simulate(coeffs, grid, bw)
        bwd = solve_type1(coeffs, fwd, bw, basis)
        with pytest.raises(ContractError, match="z representation"):
            z_representation(coeffs, None, fwd, bwd, 3, grid.N, [0], _mc(), basis)


class TestCoupled:
    def test_decoupled_converges_in_two_steps(self, grid, basis):
        coeffs = builtin("coupled", {"kappa": 0.0})
        bw = sample_brownian(grid, 500, seed=2)
        res = solve_coupled(coeffs, grid, bw, basis)
        assert res.status == "converged"
        assert res.iterations == 2 and res.trace[1] == 0.0
        assert coupled_residual(res, coeffs, bw, basis) == 0.0

    def test_weak_coupling_contracts(self, grid, basis):
        coeffs = builtin("coupled", {"kappa": 0.1})
        bw = sample_brownian(grid, 500, seed=2)
        res = solve_coupled(coeffs, grid, bw, basis, tol=1e-6, max_iter=30)
        assert res.status == "converged", res.to_dict()
        assert all(b < a for a, b in zip(res.trace, res.trace[1:])), f"trace {res.trace}"
        assert all(r < 0.5 for r in res.ratios)
        assert res.increments_decay

    def test_strong_coupling_diverges(self, grid, basis):
        coeffs = builtin("coupled", {"kappa": 50.0})
        bw = sample_brownian(grid, 200, seed=2)
        res = solve_coupled(coeffs, grid, bw, basis, max_iter=10)
        assert res.status == "diverged", res.to_dict()
        assert res.message
        assert not res.increments_decay

    def test_max_iter_floor(self, grid, basis):
        bw = sample_brownian(grid, 10, seed=0)
        with pytest.raises(ConfigError, match="max_iter"):
            solve_coupled(builtin("coupled"), grid, bw, basis, max_iter=1)

    def test_residual_needs_an_iterate(self, grid, basis):
        bw = sample_brownian(grid, 10, seed=0)
        with pytest.raises(ContractError, match="no iterate"):
            coupled_residual(CoupledResult(None, None, [], "diverged"), builtin("coupled"), bw, basis)

    @pytest.mark.parametrize(
        "trace,decays",
        [([1.0, 0.5, 0.25], True), ([1.0, 0.5, 0.5], True), ([1.0, 0.5, 0.6], False), ([1.0], False), ([], False)],
    )
    def test_increments_decay(self, trace, decays):
        assert CoupledResult(None, None, trace, "max_iter").increments_decay is decays
