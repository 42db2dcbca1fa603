from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from volterrafk.coefficients import CoefficientSet, probe_monotonicity
from volterrafk.condexp import BasisSpec, Design, features
from volterrafk.errors import ConfigError, ContractError, NumericalError
from volterrafk.forward import ForwardSolution
from volterrafk.grid import BrownianBatch, PathBatch, Region, TimeGrid, TwoTimeField

log = logging.getLogger(__name__)

# driver(i, r, y, z, z2) -> (n,): the generator at parameter t_i and integration
# time t_r, with y = Y_{t_r} on the diagonal.
Driver = Callable[[int, int, np.ndarray, np.ndarray, "np.ndarray | None"], np.ndarray]


@dataclass(eq=False)
class BackwardSolution:
    grid: TimeGrid
    Y: PathBatch
    Ytilde: TwoTimeField  # UPPER, (i, k) = Ỹ^{t_i}_{t_k}
    Z: TwoTimeField  # UPPER, tail (d,)
    Z2: TwoTimeField | None  # LOWER, type-II only
    meanY: np.ndarray
    stderrY: np.ndarray  # Monte Carlo error of meanY
    reg_stderr: np.ndarray  # regression error of the diagonal fit at each k
    stop_raw: np.ndarray  # (n, N+1) raw targets of each parameter at the last step, NaN if inactive
    stop: int = 0
    name: str = ""
    implicit: bool = False
    params: tuple[int, ...] = field(default=())

    @property
    def n_paths(self) -> int:
        return self.Y.n_paths

    @property
    def stop_sd(self) -> np.ndarray:
        if self.n_paths < 2:
            return np.zeros(self.grid.N + 1)
        return self.stop_raw.std(axis=0, ddof=1)

    def value_at_stop(self, i: int) -> tuple[float, float]:
        """Mean of Ỹ^{t_i}_{t_stop} and its Monte Carlo standard error."""
        if i not in self.params:
            raise ContractError(f"parameter {i} was not carried by this solve")
        v = self.Ytilde.get(i, self.stop)
        return float(v.mean()), float(self.stop_sd[i] / math.sqrt(self.n_paths))


class DesignCache:
    """Per-time regression designs built from the forward information."""

    def __init__(self, basis: BasisSpec, fwd: ForwardSolution):
        self.basis = basis
        self.fwd = fwd
        self._designs: dict[int, Design] = {}

    def get(self, k: int) -> Design:
        design = self._designs.get(k)
        if design is None:
            design = Design(
                features(self.basis, self.fwd, k),
                self.basis.ridge,
                intercept=self.basis.include_constant,
                cell=(None, k),
            )
            self._designs[k] = design
        return design

    def release(self, k: int) -> None:
        self._designs.pop(k, None)


class CoefficientDriver:
    """Evaluates f on the grid prefix of the forward path."""

    def __init__(self, coeffs: CoefficientSet, fwd: ForwardSolution):
        self.coeffs = coeffs
        self.grid = fwd.grid
        self.X = fwd.X.values

    def __call__(self, i, r, y, z, z2):
        return self.coeffs.eval_f(self.grid.time(i), self.grid.time(r), self.X[:, : r + 1], y, z, z2)


def _se(v: np.ndarray) -> float:
    return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0


def sweep(
    grid: TimeGrid,
    bw: BrownianBatch,
    cache: DesignCache,
    terminal: Callable[[int], np.ndarray],
    driver: Driver,
    *,
    stop: int = 0,
    params: Iterable[int] | None = None,
    type2: bool = False,
    implicit: bool = False,
    name: str = "",
) -> BackwardSolution:
    """Backward LSMC sweep k = N-1..stop over the family of BSDEs.

    Parameters i >= stop are always carried (their diagonals feed the driver);
    `params` adds rows i < stop, as needed for U(t, s, x) with t < s.
    """
    N, n, d, dt = grid.N, bw.n_paths, bw.d, grid.dt
    grid.check_index(stop, name="stop")
    if implicit and type2:
        raise ConfigError("the implicit diagonal variant is only available for type-I drivers")
    active = sorted(set(range(stop, N + 1)) | set(range(N + 1) if params is None else params))
    for i in active:
        grid.check_index(i, name="parameter")

    Yt = TwoTimeField(Region.UPPER, n, N)
    Z = TwoTimeField(Region.UPPER, n, N, (d,))
    Z2 = TwoTimeField(Region.LOWER, n, N, (d,)) if type2 else None
    Y = np.full((n, N + 1), np.nan)
    meanY = np.full(N + 1, np.nan)
    stderrY = np.full(N + 1, np.nan)
    reg_se = np.full(N + 1, np.nan)
    stop_raw = np.full((n, N + 1), np.nan)

    def represent(m: int) -> None:
        # martingale representation of Y_m at every earlier node j >= stop
        upper = Y[:, m]
        for j in range(m - 1, stop - 1, -1):
            design = cache.get(j)
            proj = design.solve(upper).fitted
            target = (upper - proj)[:, None] * bw.dW(j) / dt
            Z2.set(m, j, design.solve(target).fitted)
            upper = proj

    for i in active:
        Yt.set(i, N, terminal(i))
    Y[:, N] = Yt.get(N, N)
    meanY[N], stderrY[N], reg_se[N] = Y[:, N].mean(), _se(Y[:, N]), 0.0
    if stop == N:
        for i in active:
            stop_raw[:, i] = Yt.get(i, N)
    if type2 and N > stop:
        represent(N)

    for k in range(N - 1, stop - 1, -1):
        rows = [i for i in active if i <= k]
        design = cache.get(k)
        dW = bw.dW(k)
        prev = np.column_stack([Yt.get(i, k + 1) for i in rows])
        centred = prev - design.solve(prev).fitted
        Zk = design.solve((centred[:, :, None] * dW[:, None, :] / dt).reshape(n, -1)).fitted
        Zk = Zk.reshape(n, len(rows), d)
        diag = rows.index(k)

        def evaluate(i: int, c: int, r: int, y: np.ndarray) -> np.ndarray:
            z2 = Z2.get(k + 1, i) if type2 else None
            v = np.asarray(driver(i, r, y, Zk[:, c], z2), dtype=float)
            if not np.all(np.isfinite(v)):
                p = int(np.flatnonzero(~np.isfinite(v))[0])
                raise NumericalError(f"non-finite driver value at path {p} (parameter i={i}, time k={k})")
            return prev[:, c] + v * dt

        if implicit:
            y0 = design.solve(evaluate(k, diag, k + 1, Y[:, k + 1])).fitted
            y1 = design.solve(evaluate(k, diag, k, y0)).fitted
            raw = np.column_stack([evaluate(i, c, k, y1) for c, i in enumerate(rows)])
        else:
            raw = np.column_stack([evaluate(i, c, k + 1, Y[:, k + 1]) for c, i in enumerate(rows)])
        fit = design.solve(raw)
        for c, i in enumerate(rows):
            Yt.set(i, k, fit.fitted[:, c])
            Z.set(i, k, Zk[:, c])
        Y[:, k] = Yt.get(k, k)
        meanY[k] = Y[:, k].mean()
        stderrY[k] = _se(raw[:, diag])
        reg_se[k] = fit.stderr[diag]
        if k == stop:
            stop_raw[:, rows] = raw
        if type2 and k > stop:
            represent(k)
        cache.release(k)
        log.debug("backward step k=%d: %d parameters, E[Y]=%.6g", k, len(rows), meanY[k])

    return BackwardSolution(
        grid=grid,
        Y=PathBatch(grid, Y, start=stop),
        Ytilde=Yt.freeze(),
        Z=Z.freeze(),
        Z2=Z2.freeze() if Z2 is not None else None,
        meanY=meanY,
        stderrY=stderrY,
        reg_stderr=reg_se,
        stop_raw=stop_raw,
        stop=stop,
        name=name,
        implicit=implicit,
        params=tuple(active),
    )


def _check_inputs(coeffs: CoefficientSet, fwd: ForwardSolution, bw: BrownianBatch) -> None:
    if bw.grid != fwd.grid or bw.n_paths != fwd.n_paths:
        raise ContractError("Brownian batch does not match the forward solution")
    if bw.d != coeffs.d:
        raise ContractError(f"Brownian dimension {bw.d} != coefficient dimension {coeffs.d}")


def _solve(coeffs, fwd, bw, basis, *, type2, params, implicit) -> BackwardSolution:
    _check_inputs(coeffs, fwd, bw)
    X = fwd.X.values
    grid = fwd.grid
    return sweep(
        grid,
        bw,
        DesignCache(basis, fwd),
        lambda i: coeffs.eval_g(grid.time(i), X),
        CoefficientDriver(coeffs, fwd),
        stop=fwd.start,
        params=params,
        type2=type2,
        implicit=implicit,
        name=coeffs.name,
    )


def solve_type1(
    coeffs: CoefficientSet,
    fwd: ForwardSolution,
    bw: BrownianBatch,
    basis: BasisSpec,
    *,
    params: Iterable[int] | None = None,
    implicit: bool = False,
) -> BackwardSolution:
    """Type-I BSVIE as a family of BSDEs parameterized by t_i.

    A restarted forward solution (fwd.start = s) stops the sweep at s.
    """
    if coeffs.meta.type2:
        raise ConfigError(f"'{coeffs.name}' has a type-II driver; use solve_type2")
    return _solve(coeffs, fwd, bw, basis, type2=False, params=params, implicit=implicit)


def solve_type2(
    coeffs: CoefficientSet,
    fwd: ForwardSolution,
    bw: BrownianBatch,
    basis: BasisSpec,
    *,
    params: Iterable[int] | None = None,
) -> BackwardSolution:
    """Type-II BSVIE in the M-solution sense; Z2 holds the representation of Y."""
    if not coeffs.meta.type2:
        raise ConfigError(f"'{coeffs.name}' has a type-I driver; use solve_type1")
    return _solve(coeffs, fwd, bw, basis, type2=True, params=params, implicit=False)


def solve(coeffs, fwd, bw, basis, *, params=None, implicit=False) -> BackwardSolution:
    if coeffs.meta.type2:
        return solve_type2(coeffs, fwd, bw, basis, params=params)
    return solve_type1(coeffs, fwd, bw, basis, params=params, implicit=implicit)


@dataclass(eq=False)
class ComparisonReport:
    certified: bool
    hypotheses: dict[str, bool]
    max_gap: float  # max over (p, i) of (YA - YB)+
    violations: int
    n_cells: int
    sigmas: float
    mean_diff: np.ndarray  # E[YB] - E[YA] per node
    a: BackwardSolution
    b: BackwardSolution

    def to_dict(self) -> dict:
        return {
            "certified": self.certified,
            "hypotheses": dict(self.hypotheses),
            "max_gap": self.max_gap,
            "violations": self.violations,
            "n_cells": self.n_cells,
            "sigmas": self.sigmas,
            "mean_diff_t0": float(self.mean_diff[self.a.stop]),
        }


def _ordered(coeffs_a, coeffs_b, fwd: ForwardSolution, rng: np.random.Generator, n_probe: int) -> dict[str, bool]:
    grid = fwd.grid
    X = fwd.X.values[:n_probe]
    n = X.shape[0]
    f_ok = True
    for _ in range(16):
        r = int(rng.integers(0, grid.N + 1))
        i = int(rng.integers(0, r + 1))
        t, tr = grid.time(i), grid.time(r)
        y = rng.standard_normal(n) * 2.0
        z = rng.standard_normal((n, coeffs_a.d))
        z2 = rng.standard_normal((n, coeffs_a.d))
        fa = coeffs_a.eval_f(t, tr, X[:, : r + 1], y, z, z2)
        fb = coeffs_b.eval_f(t, tr, X[:, : r + 1], y, z, z2)
        f_ok &= bool(np.all(fa <= fb + 1e-12 * (1.0 + np.abs(fb))))
    g_ok = True
    for i in range(grid.N + 1):
        ga, gb = coeffs_a.eval_g(grid.time(i), X), coeffs_b.eval_g(grid.time(i), X)
        g_ok &= bool(np.all(ga <= gb + 1e-12 * (1.0 + np.abs(gb))))
    mono = any(
        c.meta.monotone_in_y and probe_monotonicity(c, grid, rng) for c in (coeffs_a, coeffs_b)
    )
    return {"f_ordered": f_ok, "g_ordered": g_ok, "monotone_in_y": mono}


def compare(
    spec_a: CoefficientSet,
    spec_b: CoefficientSet,
    fwd: ForwardSolution,
    bw: BrownianBatch,
    basis: BasisSpec,
    *,
    sigmas: float = 3.0,
    n_probe: int = 256,
    seed: int = 0,
) -> ComparisonReport:
    """Empirical comparison principle with common random numbers."""
    hyp = _ordered(spec_a, spec_b, fwd, np.random.default_rng(seed), n_probe)
    certified = all(hyp.values())
    if not certified:
        log.warning("comparison hypotheses fail on samples: %s", {k: v for k, v in hyp.items() if not v})
    sa = solve(spec_a, fwd, bw, basis)
    sb = solve(spec_b, fwd, bw, basis)
    s = sa.stop
    ya, yb = sa.Y.values[:, s:], sb.Y.values[:, s:]
    se = np.sqrt(sa.reg_stderr[s:] ** 2 + sb.reg_stderr[s:] ** 2)
    tol = sigmas * se[None, :] + 1e-10 * (1.0 + np.abs(yb))
    gap = ya - yb
    return ComparisonReport(
        certified=certified,
        hypotheses=hyp,
        max_gap=float(np.max(np.maximum(gap, 0.0))),
        violations=int(np.count_nonzero(gap > tol)),
        n_cells=int(gap.size),
        sigmas=sigmas,
        mean_diff=sb.meanY - sa.meanY,
        a=sa,
        b=sb,
    )


def check_identities(bwd: BackwardSolution, fwd: ForwardSolution, coeffs: CoefficientSet) -> dict[str, bool]:
    """Diagonal Ỹ^{t}_{t} = Y_t and terminal Ỹ^{t}_{T} = g(t, X), both bitwise."""
    grid = bwd.grid
    rows = range(bwd.stop, grid.N + 1)
    diagonal = all(np.array_equal(bwd.Y.values[:, k], bwd.Ytilde.get(k, k)) for k in rows)
    terminal = all(
        np.array_equal(bwd.Ytilde.get(i, grid.N), coeffs.eval_g(grid.time(i), fwd.X.values)) for i in bwd.params
    )
    return {"diagonal": diagonal, "terminal": terminal}


def martingale_residual(bwd: BackwardSolution, bw: BrownianBatch) -> np.ndarray:
    """var(Y_i - E[Y_i] - sum_k Z2[i][k] dW_k) / var(Y_i) for i > stop."""
    if bwd.Z2 is None:
        raise ContractError("martingale residual needs a type-II solution")
    N, s = bwd.grid.N, bwd.stop
    out = np.zeros(N + 1)
    for i in range(s + 1, N + 1):
        y = bwd.Y.values[:, i]
        resid = y - bwd.meanY[i]
        for k in range(s, i):
            resid = resid - np.sum(bwd.Z2.get(i, k) * bw.dW(k), axis=1)
        var = y.var()
        out[i] = resid.var() / var if var > 0 else 0.0
    return out


def flow_residual(
    bwd: BackwardSolution,
    fwd: ForwardSolution,
    bw: BrownianBatch,
    coeffs: CoefficientSet,
    i: int,
    k: int,
) -> dict[str, float]:
    """Discrete backward flow: Ỹ^{t_i}_{t_k} + sum_{j=i}^{k-1}[f dt - Z dW] has mean Y_{t_i} given F_{t_i}.

    Returns the standardized mean gap z; |z| <= 3 is the pass criterion.
    """
    grid = bwd.grid
    if not (bwd.stop <= i <= k <= grid.N) or i not in bwd.params:
        raise ContractError(f"flow residual needs stop <= i <= k <= N, got i={i}, k={k}")
    drive = CoefficientDriver(coeffs, fwd)
    Y = bwd.Y.values
    v = bwd.Ytilde.get(i, k).copy()
    stoch = np.zeros(bwd.n_paths)
    for j in range(i, k):
        r = j if bwd.implicit else j + 1
        z = bwd.Z.get(i, j)
        z2 = bwd.Z2.get(j + 1, i) if bwd.Z2 is not None else None
        inc = np.sum(z * bw.dW(j), axis=1)
        v += drive(i, r, Y[:, r], z, z2) * grid.dt - inc
        stoch += inc
    gap = v - Y[:, i]
    # regression residuals have zero sample mean, the stochastic integral does not
    mean, se = float(gap.mean()), math.hypot(_se(gap), _se(stoch))
    return {"mean": mean, "stderr": se, "z": mean / se if se > 0 else 0.0}


def moment_report(bwd: BackwardSolution, x0: np.ndarray) -> dict[str, float]:
    s = bwd.stop
    m2 = np.mean(bwd.Y.values[:, s:] ** 2, axis=0)
    x0norm = float(np.max(np.asarray(x0) ** 2))
    sup = float(m2.max())
    return {"sup_E_Y2": sup, "x0_sup2": x0norm, "C": sup / (1.0 + x0norm)}
