from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.integrate
import scipy.linalg

from volterrafk.coefficients import CoefficientSet, DerivativeWeights, KernelSpec, as_paths_d
from volterrafk.errors import ConfigError, ContractError, NumericalError
from volterrafk.grid import (
    PATH_CHUNK,
    BrownianBatch,
    PathBatch,
    Region,
    TimeGrid,
    TwoTimeField,
    path_stream,
)
from volterrafk.parallel import chunks, map_ordered

log = logging.getLogger(__name__)


@dataclass(eq=False)
class ForwardSolution:
    """X on the grid plus the packed auxiliary field X̃ (entry (i, j) = X̃^{s_j}_{t_i})."""

    grid: TimeGrid
    X: PathBatch
    Xtilde: TwoTimeField
    coeffs: CoefficientSet
    x0: np.ndarray  # (n_paths, N+1)
    seed: int
    start: int = 0
    y: np.ndarray | None = None  # diagonal Y plugged into b, sigma (coupled runs)

    @property
    def n_paths(self) -> int:
        return self.X.n_paths


def initial_path(x0, grid: TimeGrid, n_paths: int) -> np.ndarray:
    a = np.asarray(x0, dtype=float)
    if a.ndim == 0:
        return np.full((n_paths, grid.N + 1), float(a))
    if a.shape[-1] != grid.N + 1:
        raise ConfigError(f"x0 has {a.shape[-1]} nodes, grid needs {grid.N + 1}")
    return np.array(np.broadcast_to(a, (n_paths, grid.N + 1)), dtype=float)


def _advance(
    coeffs: CoefficientSet,
    grid: TimeGrid,
    inc: np.ndarray,
    acc: np.ndarray,
    X: np.ndarray,
    first: int,
    y: np.ndarray | None,
    Xt: TwoTimeField | None,
    path_offset: int,
) -> None:
    """Euler columns i = first+1..N in place.

    acc[:, j] holds X̃^{s_j}_{t_{i-1}} on entry to column i; coefficients only
    read X[:, :i], which is already final.
    """
    dt = grid.dt
    for i in range(first + 1, grid.N + 1):
        k = i - 1
        r = grid.time(k)
        prefix = X[:, : k + 1]
        yk = None if y is None else y[:, k]
        dW = inc[:, k, :]
        for j in range(i, grid.N + 1):
            t = grid.time(j)
            step = coeffs.eval_b(t, r, prefix, yk) * dt + np.sum(coeffs.eval_sigma(t, r, prefix, yk) * dW, axis=1)
            if not np.all(np.isfinite(step)):
                p = int(np.flatnonzero(~np.isfinite(step))[0]) + path_offset
                raise NumericalError(f"non-finite coefficient value at (path={p}, i={i}, j={j}) in '{coeffs.name}'")
            acc[:, j] += step
        X[:, i] = acc[:, i]
        if Xt is not None:
            Xt.set_row(i, acc[:, i:])


def simulate(
    coeffs: CoefficientSet,
    grid: TimeGrid,
    bw: BrownianBatch,
    x0=0.0,
    *,
    start: int = 0,
    y: np.ndarray | None = None,
) -> ForwardSolution:
    """Euler scheme for the FSVIE and its auxiliary field.

    With start = s the past x0 on [0, t_s] is frozen and only increments
    k >= s are applied (the restart used by U(t, s, x)).
    """
    grid.check_index(start, name="start")
    if bw.grid != grid:
        raise ContractError("Brownian batch was sampled on a different grid")
    if bw.d != coeffs.d:
        raise ContractError(f"Brownian dimension {bw.d} != coefficient dimension {coeffs.d}")
    n, N = bw.n_paths, grid.N
    x0 = initial_path(x0, grid, n)
    if y is not None and y.shape != (n, N + 1):
        raise ContractError(f"y has shape {y.shape}, expected {(n, N + 1)}")
    log.info(
        "forward storage for '%s': %d paths, N=%d, %.1f MiB triangular",
        coeffs.name,
        n,
        N,
        TwoTimeField.estimate_bytes(n, N) / 2**20,
    )

    Xt = TwoTimeField(Region.UPPER, n, N)
    X = np.empty((n, N + 1))
    X[:, : start + 1] = x0[:, : start + 1]
    for i in range(start + 1):
        Xt.set_row(i, x0[:, i:])

    def run(bounds: tuple[int, int]) -> None:
        a, b = bounds
        sl = slice(a, b)
        acc = x0[sl].copy()
        _advance(coeffs, grid, bw.increments[sl], acc, X[sl], start, None if y is None else y[sl], Xt.take(sl), a)

    map_ordered(run, chunks(n, PATH_CHUNK))
    return ForwardSolution(
        grid=grid,
        X=PathBatch(grid, X),
        Xtilde=Xt.freeze(),
        coeffs=coeffs,
        x0=x0,
        seed=bw.seed,
        start=start,
        y=y,
    )


def restart(sol: ForwardSolution, i: int, bw: BrownianBatch) -> PathBatch:
    """Re-simulate from X̃ at t_i with the same increments."""
    grid = sol.grid
    grid.check_index(i, name="restart index")
    if i < sol.start:
        raise ContractError(f"restart index {i} precedes the frozen past (start={sol.start})")
    X = sol.X.values.copy()
    acc = np.empty_like(X)
    acc[:, i:] = sol.Xtilde.row(i)
    _advance(sol.coeffs, grid, bw.increments, acc, X, i, sol.y, None, 0)
    return PathBatch(grid, X)


def concat(sol: ForwardSolution, i: int) -> PathBatch:
    """X̂^{t_i}: X on [0, t_i), the frozen future X̃^{·}_{t_i} on [t_i, T]."""
    sol.grid.check_index(i, name="concat index")
    values = np.concatenate([sol.X.values[:, :i], sol.Xtilde.row(i)], axis=1)
    return PathBatch(sol.grid, values)


def simulate_variational(
    coeffs: CoefficientSet,
    weights: DerivativeWeights | None,
    sol: ForwardSolution,
    eta,
    s: int,
    bw: BrownianBatch,
) -> tuple[PathBatch, TwoTimeField]:
    """First-order variation of X in direction eta, frozen along sol.X."""
    if weights is None:
        raise ContractError(f"no derivative weights for '{coeffs.name}'")
    grid = sol.grid
    grid.check_index(s, name="s")
    n, N, dt = sol.n_paths, grid.N, grid.dt
    acc = initial_path(eta, grid, n)
    acc[:, :s] = 0.0
    dX = np.zeros((n, N + 1))
    dXt = TwoTimeField(Region.UPPER, n, N)
    dX[:, s] = acc[:, s]
    dXt.set_row(s, acc[:, s:])
    X = sol.X.values
    for i in range(s + 1, N + 1):
        k = i - 1
        r = grid.time(k)
        xr = X[:, k]
        yk = None if sol.y is None else sol.y[:, k]
        dW = bw.increments[:, k, :]
        g = dX[:, k]
        for j in range(i, N + 1):
            t = grid.time(j)
            coef = np.asarray(weights.db(t, r, xr, yk), dtype=float) * dt + np.sum(
                as_paths_d(weights.dsigma(t, r, xr, yk), n, coeffs.d) * dW, axis=1
            )
            acc[:, j] += coef * g
        dX[:, i] = acc[:, i]
        dXt.set_row(i, acc[:, i:])
    return PathBatch(grid, dX), dXt.freeze()


def moment_report(sol: ForwardSolution) -> dict:
    """Sample E[sup_k |X_k|^2] and the implied constant C(1 + |x0|^2)."""
    sup2 = np.max(sol.X.values**2, axis=1)
    x0norm = float(np.max(sol.x0**2))
    mean = float(sup2.mean())
    return {
        "E_sup_X2": mean,
        "stderr": float(sup2.std(ddof=1) / math.sqrt(sup2.size)) if sup2.size > 1 else 0.0,
        "x0_sup2": x0norm,
        "C": mean / (1.0 + x0norm),
    }


def fbm_variance_target(kernel: KernelSpec, grid: TimeGrid) -> dict:
    """Continuous and scheme-level Var(X_T) for X = ∫ K(T, r) dW_r."""
    T = grid.T
    if kernel.kind == "fractional":
        continuous = kernel.c**2 * T ** (2 * kernel.H) / (2 * kernel.H)
    else:
        continuous = scipy.integrate.quad(lambda r: kernel(T, r) ** 2, 0.0, T, limit=200)[0]
    discrete = sum(kernel(T, grid.time(k)) ** 2 for k in range(grid.N)) * grid.dt
    return {"continuous": continuous, "discrete": discrete, "bias": continuous - discrete}


def _kernel_matrix(kernel: KernelSpec, grid: TimeGrid) -> np.ndarray:
    N = grid.N
    K = np.zeros((N + 1, N + 1))
    for a in range(1, N + 1):
        for k in range(a):
            K[a, k] = kernel(grid.time(a), grid.time(k))
    return K


def kernel_covariance(kernel: KernelSpec, grid: TimeGrid) -> np.ndarray:
    """Cov(X_{t_a}, X_{t_b}) of the discretized process, x0 = 0, b = 0."""
    K = _kernel_matrix(kernel, grid)
    return K @ K.T * grid.dt


def exact_gaussian_paths(kernel: KernelSpec, grid: TimeGrid, n_paths: int, seed: int = 0) -> PathBatch:
    """Cholesky draws with the scheme's covariance (small N only)."""
    C = kernel_covariance(kernel, grid)[1:, 1:]
    try:
        L = scipy.linalg.cholesky(C, lower=True)
    except np.linalg.LinAlgError:
        L = scipy.linalg.cholesky(C + 1e-12 * np.eye(C.shape[0]), lower=True)
    z = path_stream(seed, 0).standard_normal((n_paths, grid.N))
    values = np.zeros((n_paths, grid.N + 1))
    values[:, 1:] = z @ L.T
    return PathBatch(grid, values)
