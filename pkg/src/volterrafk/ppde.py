from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from volterrafk.backward import BackwardSolution, DesignCache, solve, solve_type1, sweep
from volterrafk.coefficients import CoefficientSet, DerivativeWeights, as_paths_d, derivative_weights
from volterrafk.condexp import BasisSpec
from volterrafk.config import MonteCarloConfig
from volterrafk.errors import BudgetError, ConfigError, ContractError, NumericalError, VolterraError
from volterrafk.forward import ForwardSolution, concat, simulate, simulate_variational
from volterrafk.grid import BrownianBatch, TimeGrid, derive_seed, sample_brownian
from volterrafk.linear_oracle import resolvent_dense
from volterrafk.parallel import map_ordered

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class UEvaluation:
    t_idx: int
    s_idx: int
    t: float
    s: float
    x: np.ndarray
    estimate: float
    stderr: float
    n_paths: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "t_idx": self.t_idx,
            "s_idx": self.s_idx,
            "t": self.t,
            "s": self.s,
            "estimate": self.estimate,
            "stderr": self.stderr,
            "n_paths": self.n_paths,
            "seed": self.seed,
        }


@dataclass(eq=False)
class DerivativeEstimate:
    eta: np.ndarray
    variational: float
    variational_se: float
    finite_difference: float
    fd_se: float
    resolvent: float
    resolvent_se: float
    eps: float
    richardson_gap: float
    richardson_ok: bool
    discrepancies: dict[str, float] = field(default_factory=dict)
    # |est(w·eta) + est((1-w)·eta) - est(eta)| and |est(2·eta) - 2·est(eta)|, same batch
    additivity_gap: float = 0.0
    homogeneity_gap: float = 0.0

    def to_dict(self) -> dict:
        return {
            "variational": self.variational,
            "variational_se": self.variational_se,
            "finite_difference": self.finite_difference,
            "fd_se": self.fd_se,
            "resolvent": self.resolvent,
            "resolvent_se": self.resolvent_se,
            "eps": self.eps,
            "richardson_gap": self.richardson_gap,
            "richardson_ok": self.richardson_ok,
            "additivity_gap": self.additivity_gap,
            "homogeneity_gap": self.homogeneity_gap,
            "discrepancies": dict(self.discrepancies),
        }


def _check_point(grid: TimeGrid, t_idx: int, s_idx: int, x) -> np.ndarray:
    grid.check_index(t_idx, name="t index")
    grid.check_index(s_idx, name="s index")
    if t_idx > s_idx:
        raise ConfigError(f"U(t, s, x) needs t <= s, got t index {t_idx} > s index {s_idx}")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != grid.N + 1:
        raise ConfigError(f"x has {x.size} nodes, grid needs {grid.N + 1}")
    return x


def _restart(coeffs, grid, t_idx, s_idx, x, bw, basis) -> tuple[ForwardSolution, BackwardSolution]:
    fwd = simulate(coeffs, grid, bw, x, start=s_idx)
    bwd = solve(coeffs, fwd, bw, basis, params=[t_idx])
    return fwd, bwd


def _batch(grid: TimeGrid, coeffs: CoefficientSet, mc: MonteCarloConfig) -> BrownianBatch:
    return sample_brownian(grid, mc.paths, coeffs.d, mc.seed, antithetic=mc.antithetic)


def eval_U(
    coeffs: CoefficientSet,
    grid: TimeGrid,
    t_idx: int,
    s_idx: int,
    x,
    mc: MonteCarloConfig,
    basis: BasisSpec,
) -> UEvaluation:
    """U(t, s, x) by restarting the FBSVIE at s from the path x on a fresh batch."""
    x = _check_point(grid, t_idx, s_idx, x)
    t, s = grid.time(t_idx), grid.time(s_idx)
    if s_idx == grid.N:
        value = float(coeffs.eval_g(t, x[None, :])[0])
        return UEvaluation(t_idx, s_idx, t, s, x, value, 0.0, 0, mc.seed)
    bw = _batch(grid, coeffs, mc)
    _, bwd = _restart(coeffs, grid, t_idx, s_idx, x, bw, basis)
    est, se = bwd.value_at_stop(t_idx)
    return UEvaluation(t_idx, s_idx, t, s, x, est, se, bw.n_paths, mc.seed)


def past_node_gap(
    coeffs: CoefficientSet,
    grid: TimeGrid,
    u: UEvaluation,
    mc: MonteCarloConfig,
    basis: BasisSpec,
    shift: float = 1.0,
) -> float:
    """|U(t, s, x') - U(t, s, x)| with x' = x moved by `shift` at the nodes before s.

    Coefficients that read only the current state never see those nodes after
    the restart, so the gap is zero on common random numbers. Nodes after s
    are the free terms of the restarted equation and do enter U.
    """
    if u.s_idx == 0:
        return 0.0
    moved = u.x.copy()
    moved[: u.s_idx] += shift
    return abs(eval_U(coeffs, grid, u.t_idx, u.s_idx, moved, mc, basis).estimate - u.estimate)


@dataclass(eq=False)
class FKReport:
    rows: list[dict]
    max_discrepancy: float
    mean_discrepancy: float
    passed: bool
    sigmas: float

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "max_discrepancy": self.max_discrepancy,
            "mean_discrepancy": self.mean_discrepancy,
            "pass": self.passed,
            "sigmas": self.sigmas,
        }


def nested_cells(n_points: int, paths: int, N: int) -> int:
    return n_points * paths * (N + 1) * (N + 2) // 2


def fk_check(
    coeffs: CoefficientSet,
    fwd: ForwardSolution,
    bwd: BackwardSolution,
    sample: Sequence[tuple[int, int]],
    mc: MonteCarloConfig,
    basis: BasisSpec,
    *,
    sigmas: float = 3.0,
) -> FKReport:
    """Y_{t_i}(p) from the global solve against U(t_i, t_i, X̂^{t_i}(p)) by nested restart."""
    grid = fwd.grid
    work = nested_cells(len(sample), mc.paths, grid.N)
    if work > mc.budget:
        raise BudgetError(f"nested evaluation needs {work} path-cells, budget is {mc.budget}")
    log.info("fk-check: %d points x %d inner paths (%d path-cells)", len(sample), mc.paths, work)
    for p, i in sample:
        if not 0 <= p < fwd.n_paths:
            raise ContractError(f"sample path {p} outside 0..{fwd.n_paths - 1}")
        grid.check_index(i, name="sample index")

    def one(item: tuple[int, tuple[int, int]]) -> dict:
        idx, (p, i) = item
        x = concat(fwd, i).values[p]
        inner = MonteCarloConfig(
            paths=mc.paths, seed=derive_seed(mc.seed, idx), antithetic=mc.antithetic, budget=mc.budget
        )
        u = eval_U(coeffs, grid, i, i, x, inner, basis)
        y = float(bwd.Y.values[p, i])
        err = math.sqrt(u.stderr**2 + float(bwd.reg_stderr[i]) ** 2)
        gap = abs(u.estimate - y)
        return {
            "path": p,
            "i": i,
            "U": u.estimate,
            "U_stderr": u.stderr,
            "Y": y,
            "regression_stderr": float(bwd.reg_stderr[i]),
            "discrepancy": gap,
            "error_bar": err,
            "pass": gap <= sigmas * err + 1e-10 * (1.0 + abs(y)),
        }

    rows = map_ordered(one, list(enumerate(sample)))
    gaps = [r["discrepancy"] for r in rows]
    return FKReport(
        rows=rows,
        max_discrepancy=max(gaps) if gaps else 0.0,
        mean_discrepancy=float(np.mean(gaps)) if gaps else 0.0,
        passed=all(r["pass"] for r in rows),
        sigmas=sigmas,
    )


class _VariationalDriver:
    """Linearized generator along the frozen solution (X, Y, Z)."""

    def __init__(self, weights: DerivativeWeights, fwd: ForwardSolution, bwd: BackwardSolution, dX: np.ndarray):
        self.w = weights
        self.grid = fwd.grid
        self.X = fwd.X.values
        self.Y = bwd.Y.values
        self.Z = bwd.Z
        self.dX = dX

    def partials(self, i: int, r: int):
        t, tr = self.grid.time(i), self.grid.time(r)
        xr, y, z = self.X[:, r], self.Y[:, r], self.Z.get(i, r - 1)
        n = xr.shape[0]
        return (
            np.asarray(self.w.df_x(t, tr, xr, y, z), dtype=float),
            np.asarray(self.w.df_y(t, tr, xr, y, z), dtype=float),
            as_paths_d(self.w.df_z(t, tr, xr, y, z), n, z.shape[1]),
        )

    def __call__(self, i, r, y, z, z2):
        fx, fy, fz = self.partials(i, r)
        return fx * self.dX[:, r] + fy * y + np.sum(fz * z, axis=1)


def _variational(coeffs, weights, fwd, bwd, bw, basis, t_idx, s_idx, eta) -> tuple[float, float, np.ndarray]:
    dX, _ = simulate_variational(coeffs, weights, fwd, eta, s_idx, bw)
    grid = fwd.grid
    X = fwd.X.values
    dXv = dX.values
    drive = _VariationalDriver(weights, fwd, bwd, dXv)
    sol = sweep(
        grid,
        bw,
        DesignCache(basis, fwd),
        lambda i: np.sum(np.asarray(weights.dg(grid.time(i), X)) * dXv, axis=1),
        drive,
        stop=s_idx,
        params=[t_idx],
        name=f"variational:{coeffs.name}",
    )
    est, se = sol.value_at_stop(t_idx)
    return est, se, dXv


def _resolvent_estimate(weights, fwd, bwd, bw, t_idx, s_idx, dX) -> tuple[float, float]:
    """E[<G(t), ∇X>] with G built from the stochastic exponential of ∂_z f and the resolvent of M ∂_y f."""
    grid = fwd.grid
    N, dt, n = grid.N, grid.dt, fwd.n_paths
    X = fwd.X.values
    drive = _VariationalDriver(weights, fwd, bwd, dX)
    rows = [t_idx] + list(range(s_idx + 1, N + 1))
    M = {}
    K1 = np.zeros((n, N + 1, N + 1))
    phi = {}
    for i in rows:
        start = max(i, s_idx)
        m = np.ones((n, N + 1))
        fx_sum = np.zeros(n)
        for r in range(start + 1, N + 1):
            fx, fy, fz = drive.partials(i, r)
            b = fz[:, 0]
            m[:, r] = m[:, r - 1] * np.exp(b * bw.increments[:, r - 1, 0] - 0.5 * b * b * dt)
            K1[:, i, r] = m[:, r] * fy
            fx_sum += m[:, r] * fx * dX[:, r]
        terminal = np.sum(np.asarray(weights.dg(grid.time(i), X)) * dX, axis=1)
        phi[i] = m[:, N] * terminal + dt * fx_sum
        M[i] = m
    if not all(np.all(np.isfinite(v)) for v in phi.values()):
        raise NumericalError("non-finite weights in the resolvent representation")
    G = resolvent_dense(K1, dt)
    v = phi[t_idx].copy()
    for l in range(s_idx + 1, N + 1):
        v += G[:, t_idx, l] * phi[l] * dt
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0


def _fd(coeffs, grid, t_idx, s_idx, x, eta, eps, bw, basis) -> tuple[float, float]:
    up = x + eps * eta
    dn = x - eps * eta
    if s_idx == grid.N:
        gu = coeffs.eval_g(grid.time(t_idx), up[None, :])[0]
        gd = coeffs.eval_g(grid.time(t_idx), dn[None, :])[0]
        return float((gu - gd) / (2 * eps)), 0.0
    _, bu = _restart(coeffs, grid, t_idx, s_idx, up, bw, basis)
    _, bd = _restart(coeffs, grid, t_idx, s_idx, dn, bw, basis)
    est = (bu.value_at_stop(t_idx)[0] - bd.value_at_stop(t_idx)[0]) / (2 * eps)
    diff = (bu.stop_raw[:, t_idx] - bd.stop_raw[:, t_idx]) / (2 * eps)
    return float(est), float(diff.std(ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0


def path_derivative(
    coeffs: CoefficientSet,
    weights: DerivativeWeights | None,
    grid: TimeGrid,
    t_idx: int,
    s_idx: int,
    x,
    eta,
    mc: MonteCarloConfig,
    basis: BasisSpec,
    *,
    eps: float | None = None,
) -> DerivativeEstimate:
    """<∂ₓU(t, s, x), eta> by the variational, finite-difference and resolvent estimators."""
    x = _check_point(grid, t_idx, s_idx, x)
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if eta.size != grid.N + 1:
        raise ConfigError(f"direction has {eta.size} nodes, grid needs {grid.N + 1}")
    eta = eta.copy()
    eta[:s_idx] = 0.0
    if coeffs.d != 1:
        raise ContractError("path derivatives need a scalar Brownian motion")
    if coeffs.meta.type2:
        raise ContractError("path derivatives are implemented for type-I drivers")
    weights = weights or derivative_weights(coeffs, grid)
    eps = eps if eps is not None else 1.0e-4 * (1.0 + float(np.max(np.abs(x))))
    moved = eta != 0.0
    if np.any(moved) and np.array_equal((x + eps * eta)[moved], x[moved]):
        raise NumericalError(f"finite-difference step eps={eps:g} underflows against x")

    bw = _batch(grid, coeffs, mc)
    fwd, bwd = _restart(coeffs, grid, t_idx, s_idx, x, bw, basis)
    var, var_se, dX = _variational(coeffs, weights, fwd, bwd, bw, basis, t_idx, s_idx, eta)
    part = np.linspace(0.0, 1.0, grid.N + 1) * eta
    var_a = _variational(coeffs, weights, fwd, bwd, bw, basis, t_idx, s_idx, part)[0]
    var_b = _variational(coeffs, weights, fwd, bwd, bw, basis, t_idx, s_idx, eta - part)[0]
    var_2 = _variational(coeffs, weights, fwd, bwd, bw, basis, t_idx, s_idx, 2.0 * eta)[0]
    res, res_se = _resolvent_estimate(weights, fwd, bwd, bw, t_idx, s_idx, dX)
    fd, fd_se = _fd(coeffs, grid, t_idx, s_idx, x, eta, eps, bw, basis)
    fd_half, _ = _fd(coeffs, grid, t_idx, s_idx, x, eta, eps / 2, bw, basis)
    gap = abs(fd - fd_half)

    def rel(a: float, b: float) -> float:
        scale = max(abs(a), abs(b))
        return abs(a - b) / scale if scale > 0 else 0.0

    return DerivativeEstimate(
        eta=eta,
        variational=var,
        variational_se=var_se,
        finite_difference=fd,
        fd_se=fd_se,
        resolvent=res,
        resolvent_se=res_se,
        eps=eps,
        richardson_gap=gap,
        richardson_ok=gap <= max(fd_se, 1e-12 * (1.0 + abs(fd))),
        additivity_gap=abs(var_a + var_b - var),
        homogeneity_gap=abs(var_2 - 2.0 * var),
        discrepancies={
            "variational_vs_fd": rel(var, fd),
            "variational_vs_resolvent": rel(var, res),
            "fd_vs_resolvent": rel(fd, res),
        },
    )


@dataclass(eq=False)
class CoupledResult:
    fwd: ForwardSolution | None
    bwd: BackwardSolution | None
    trace: list[float]
    status: str  # converged | diverged | max_iter
    message: str = ""

    @property
    def iterations(self) -> int:
        return len(self.trace)

    @property
    def ratios(self) -> list[float]:
        return [b / a for a, b in zip(self.trace, self.trace[1:]) if a > 0]

    @property
    def increments_decay(self) -> bool:
        """Every Picard gap is at most the previous one."""
        return len(self.trace) >= 2 and all(b <= a for a, b in zip(self.trace, self.trace[1:]))

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "iterations": self.iterations,
            "trace": list(self.trace),
            "ratios": self.ratios,
            "message": self.message,
        }


def solve_coupled(
    coeffs: CoefficientSet,
    grid: TimeGrid,
    bw: BrownianBatch,
    basis: BasisSpec,
    *,
    x0=0.0,
    tol: float = 1.0e-8,
    max_iter: int = 20,
    growth: float = 1.0e3,
) -> CoupledResult:
    """Whole-interval Picard iteration y -> Y^y for the coupled FBSVIE."""
    if max_iter < 2:
        raise ConfigError("max_iter must be ≥ 2")
    y = np.zeros((bw.n_paths, grid.N + 1))
    trace: list[float] = []
    fwd = bwd = None
    for it in range(1, max_iter + 1):
        try:
            f_new = simulate(coeffs, grid, bw, x0, y=y)
            b_new = solve_type1(coeffs, f_new, bw, basis)
        except VolterraError as e:
            log.info("Picard iteration %d failed: %s", it, e)
            return CoupledResult(fwd, bwd, trace, "diverged", f"iteration {it} failed: {e}")
        y_new = b_new.Y.values
        gap = math.sqrt(float(np.sum(np.mean((y_new - y) ** 2, axis=0))) * grid.dt)
        trace.append(gap)
        fwd, bwd, y = f_new, b_new, y_new
        log.info("Picard iteration %d: gap %.3e", it, gap)
        if not math.isfinite(gap) or (trace[0] > 0 and gap > growth * trace[0]):
            return CoupledResult(fwd, bwd, trace, "diverged", "gap growth exceeds the divergence threshold")
        if gap < tol:
            return CoupledResult(fwd, bwd, trace, "converged")
    tail = trace[-3:]
    msg = "no contraction detected" if all(b >= a for a, b in zip(tail, tail[1:])) else "tolerance not reached"
    return CoupledResult(fwd, bwd, trace, "max_iter", msg)


def coupled_residual(result: CoupledResult, coeffs: CoefficientSet, bw: BrownianBatch, basis: BasisSpec, x0=0.0) -> float:
    """Max change of (X, Y) when the fixed point is plugged back into both equations."""
    if result.fwd is None or result.bwd is None:
        raise ContractError("no iterate to check")
    grid = result.fwd.grid
    y = result.bwd.Y.values
    fwd = simulate(coeffs, grid, bw, x0, y=y)
    bwd = solve_type1(coeffs, fwd, bw, basis)
    return float(max(np.max(np.abs(fwd.X.values - result.fwd.X.values)), np.max(np.abs(bwd.Y.values - y))))


def z_representation(
    coeffs: CoefficientSet,
    weights: DerivativeWeights | None,
    fwd: ForwardSolution,
    bwd: BackwardSolution,
    i: int,
    k: int,
    paths: Sequence[int],
    mc: MonteCarloConfig,
    basis: BasisSpec,
    *,
    sigmas: float = 3.0,
) -> list[dict]:
    """Z^{t_i}_{t_k}(p) from the global solve against <∂ₓU(t_i, t_k, X̂^{t_k}), sigma(·, t_k, X)>."""
    grid = fwd.grid
    if not 0 <= i <= k < grid.N:
        raise ContractError(f"z representation needs 0 <= i <= k < N, got i={i}, k={k}")
    weights = weights or derivative_weights(coeffs, grid)
    X = fwd.X.values
    xhat = concat(fwd, k).values
    rows = []
    for idx, p in enumerate(paths):
        eta = np.zeros(grid.N + 1)
        prefix = X[p : p + 1, : k + 1]
        for l in range(k, grid.N + 1):
            eta[l] = coeffs.eval_sigma(grid.time(l), grid.time(k), prefix, None)[0, 0]
        inner = MonteCarloConfig(paths=mc.paths, seed=derive_seed(mc.seed, idx), antithetic=mc.antithetic)
        bw = _batch(grid, coeffs, inner)
        f_in, b_in = _restart(coeffs, grid, i, k, xhat[p], bw, basis)
        est, se, _ = _variational(coeffs, weights, f_in, b_in, bw, basis, i, k, eta)
        z = float(bwd.Z.get(i, k)[p, 0])
        err = math.sqrt(se**2 + float(bwd.reg_stderr[k]) ** 2)
        rows.append({"path": p, "Z": z, "derivative": est, "stderr": se, "gap": abs(z - est), "pass": abs(z - est) <= sigmas * err})
    return rows
