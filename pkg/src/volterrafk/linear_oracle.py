from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.special

from volterrafk.backward import solve_type2
from volterrafk.coefficients import CoefficientMeta, CoefficientSet, LinearBSVIESpec
from volterrafk.condexp import BasisSpec
from volterrafk.errors import ConfigError, ContractError, NumericalError
from volterrafk.forward import simulate
from volterrafk.grid import BrownianBatch, Region, TimeGrid, TwoTimeField
from volterrafk.parallel import chunks, map_ordered

log = logging.getLogger(__name__)

ORACLE_CHUNK = 2048


@dataclass(frozen=True)
class DualPairSpec:
    """Linear FSVIE  X_t = eta_t + ∫ b(t,s) X_s ds + ∫ sigma(t,s) X_s dW_s  and its
    type-II dual  Y_t = g(t) + ∫_t^T [b(s,t) Y_s + sigma(s,t) Z(s,t)] ds - ∫_t^T Z(t,s) dW_s.
    """

    name: str
    eta: Callable[[float], float]
    b: Callable[[float, float], float]
    sigma: Callable[[float, float], float]
    g: Callable  # g(t, w_full) -> (n,)
    deterministic_g: bool = False


@dataclass(frozen=True)
class MeasureKernel:
    """Finite-variation kernels as node weights: b(t, s, nodes) -> (N+1,) weights on r <= s."""

    b: Callable
    sigma: Callable


@dataclass(eq=False)
class ResolventTable:
    M: TwoTimeField
    K1: TwoTimeField
    Gamma: TwoTimeField


@dataclass(eq=False)
class ClosedForm:
    values: np.ndarray  # E[Y_{t_i}]
    stderr: np.ndarray
    method: str  # "deterministic" or "monte-carlo"
    per_path: np.ndarray | None = None


@dataclass(eq=False)
class DualityResult:
    lhs: float
    rhs: float
    stderr: float
    residual: float
    passed: bool
    dual_mean: np.ndarray  # E[Y_{t_k}]
    forward_mean: np.ndarray  # E[X_{t_k}]

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "stderr": self.stderr,
            "residual": self.residual,
            "pass": self.passed,
        }


def _scalar_paths(bw: BrownianBatch) -> np.ndarray:
    if bw.d != 1:
        raise ContractError(f"linear oracle needs a scalar Brownian motion, got d={bw.d}")
    return bw.paths()[:, :, 0]


def _per_path(v, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(v, dtype=float), (n,))


def stochastic_exponential(beta: Callable, grid: TimeGrid, bw: BrownianBatch) -> TwoTimeField:
    """M^{t_i}_{t_k}, k >= i, by the log-Euler step (each factor has unit mean).

    beta(t, r, w) reads the Brownian prefix w (n, k+1).
    """
    W = _scalar_paths(bw)
    n, N, dt = bw.n_paths, grid.N, grid.dt
    M = TwoTimeField(Region.UPPER, n, N)
    for i in range(N + 1):
        m = np.ones(n)
        M.set(i, i, m)
        t = grid.time(i)
        for k in range(i, N):
            b = _per_path(beta(t, grid.time(k), W[:, : k + 1]), n)
            if not np.all(np.isfinite(b)):
                raise NumericalError(f"non-finite beta at (i={i}, k={k})")
            m = m * np.exp(b * bw.increments[:, k, 0] - 0.5 * b * b * dt)
            M.set(i, k + 1, m)
    return M


def kernel_k1(alpha: Callable, M: TwoTimeField, grid: TimeGrid, W: np.ndarray) -> TwoTimeField:
    n, N = M.n_paths, grid.N
    K1 = TwoTimeField(Region.UPPER, n, N)
    for i in range(N + 1):
        t = grid.time(i)
        for k in range(i, N + 1):
            K1.set(i, k, M.get(i, k) * _per_path(alpha(t, grid.time(k), W[:, : k + 1]), n))
    return K1


def _step(K: np.ndarray, G: np.ndarray, i: int, dt: float) -> np.ndarray:
    # sum over i < k < j of K[i, k] G[k, j]; G is zero on and below the diagonal
    return dt * np.einsum("pk,pkj->pj", K[:, i, i + 1 :], G[:, i + 1 :, :])


def resolvent_dense(K: np.ndarray, dt: float) -> np.ndarray:
    n, n1, _ = K.shape
    G = np.zeros_like(K)
    strict = np.zeros_like(K)
    for i in range(n1 - 1, -1, -1):
        row = K[:, i, :].copy()
        if i < n1 - 1:
            row += _step(K, strict, i, dt)
        row[:, :i] = 0.0
        G[:, i, :] = row
        strict[:, i, i + 1 :] = row[:, i + 1 :]
    return G


def resolvent(K1: TwoTimeField, grid: TimeGrid) -> TwoTimeField:
    """Γ = K1 + K1 * Γ by the left-rectangle recursion, row by row from t_N."""
    if K1.region is not Region.UPPER:
        raise ContractError("resolvent kernel must live in the upper region")
    G = resolvent_dense(K1.to_dense(fill=0.0), grid.dt)
    return TwoTimeField.from_dense(Region.UPPER, G)


def resolvent_identity_residual(K1: TwoTimeField, Gamma: TwoTimeField, grid: TimeGrid) -> float:
    K, G = K1.to_dense(fill=0.0), Gamma.to_dense(fill=0.0)
    strict = np.triu(G, 1)
    worst = 0.0
    for i in range(grid.N + 1):
        rhs = K[:, i, :].copy()
        if i < grid.N:
            rhs += _step(K, strict, i, grid.dt)
        worst = max(worst, float(np.max(np.abs(G[:, i, i:] - rhs[:, i:]))))
    return worst


def resolvent_series(K1: TwoTimeField, grid: TimeGrid, n_terms: int) -> TwoTimeField:
    """Σ_{m<=n_terms} K_m with K_{m+1}(t,s) = Σ_{t<r<s} K1(t,r) K_m(r,s) Δ."""
    if n_terms < 1:
        raise ConfigError("n_terms must be ≥ 1")
    K = K1.to_dense(fill=0.0)
    term = K.copy()
    total = K.copy()
    for _ in range(n_terms - 1):
        strict = np.triu(term, 1)
        nxt = np.zeros_like(term)
        for i in range(grid.N):
            nxt[:, i, :] = _step(K, strict, i, grid.dt)
        term = nxt
        total += term
    return TwoTimeField.from_dense(Region.UPPER, total)


def series_tail_bound(c0: float, span: float, n_terms: int) -> float:
    """Bound on Σ_{m>n_terms} |K_m| when |K1| <= c0 on a window of length span."""
    x = c0 * span
    return float(c0 * math.exp(x) * scipy.special.gammainc(n_terms, x))


def resolvent_table(spec: LinearBSVIESpec, grid: TimeGrid, bw: BrownianBatch) -> ResolventTable:
    W = _scalar_paths(bw)
    M = stochastic_exponential(spec.beta, grid, bw)
    K1 = kernel_k1(spec.alpha, M, grid, W)
    return ResolventTable(M=M, K1=K1, Gamma=resolvent(K1, grid))


def _check_bounded(spec: LinearBSVIESpec, grid: TimeGrid, W: np.ndarray) -> bool:
    """Samples alpha, beta on the grid; returns True when beta vanishes there."""
    n = W.shape[0]
    beta_zero = True
    for i in range(grid.N + 1):
        t = grid.time(i)
        for k in range(i, grid.N + 1):
            a = _per_path(spec.alpha(t, grid.time(k), W[:, : k + 1]), n)
            b = _per_path(spec.beta(t, grid.time(k), W[:, : k + 1]), n)
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise ConfigError(f"linear spec '{spec.name}' has non-finite coefficients at (i={i}, k={k})")
            if max(np.max(np.abs(a)), np.max(np.abs(b))) > spec.bound:
                raise ConfigError(f"linear spec '{spec.name}' exceeds the coefficient bound {spec.bound:g}")
            beta_zero &= bool(np.all(b == 0.0))
    return beta_zero


def _deterministic(spec: LinearBSVIESpec, grid: TimeGrid) -> np.ndarray:
    """Y_i = xi_i + Δ Σ_{k>i} alpha(t_i, t_k) Y_k, solved from t_N back."""
    N, dt = grid.N, grid.dt
    w = np.zeros((1, N + 1))
    Y = np.zeros(N + 1)
    for i in range(N, -1, -1):
        t = grid.time(i)
        acc = float(_per_path(spec.xi(t, w), 1)[0])
        for k in range(i + 1, N + 1):
            acc += float(_per_path(spec.alpha(t, grid.time(k), w[:, : k + 1]), 1)[0]) * Y[k] * dt
        Y[i] = acc
    return Y


def closed_form(spec: LinearBSVIESpec, grid: TimeGrid, bw: BrownianBatch, *, chunk: int = ORACLE_CHUNK) -> ClosedForm:
    """Variation-of-constants value of E[Y_{t_i}] for a linear BSVIE."""
    W = _scalar_paths(bw)
    beta_zero = _check_bounded(spec, grid, W[: min(64, bw.n_paths)])
    N, dt = grid.N, grid.dt
    if beta_zero and spec.deterministic_coefficients and spec.deterministic_xi:
        Y = _deterministic(spec, grid)
        return ClosedForm(
            values=Y,
            stderr=np.zeros(N + 1),
            method="deterministic",
            per_path=np.broadcast_to(Y, (bw.n_paths, N + 1)).copy(),
        )

    def block(bounds: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        sub = bw.take(slice(*bounds))
        Wb = W[bounds[0] : bounds[1]]
        table = resolvent_table(spec, grid, sub)
        xi = np.column_stack([_per_path(spec.xi(grid.time(i), Wb), sub.n_paths) for i in range(N + 1)])
        V = np.empty((sub.n_paths, N + 1))
        for i in range(N + 1):
            v = table.M.get(i, N) * xi[:, i]
            for k in range(i + 1, N + 1):
                v = v + table.Gamma.get(i, k) * table.M.get(k, N) * xi[:, k] * dt
            V[:, i] = v
        return V.sum(axis=0), (V**2).sum(axis=0)

    parts = map_ordered(block, chunks(bw.n_paths, chunk))
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    n = bw.n_paths
    mean = s1 / n
    var = np.maximum(s2 / n - mean**2, 0.0) * n / max(1, n - 1)
    return ClosedForm(values=mean, stderr=np.sqrt(var / n), method="monte-carlo")


def state_linear(pair: DualPairSpec) -> CoefficientSet:
    """Forward side of a dual pair as a coefficient set: b(t,r) X_r dr + sigma(t,r) X_r dW_r."""
    return CoefficientSet(
        name=f"dual-forward:{pair.name}",
        b=lambda t, r, x, y: pair.b(t, r) * x[:, -1],
        sigma=lambda t, r, x, y: pair.sigma(t, r) * x[:, -1],
        f=lambda t, r, x, y, z, z2: 0.0,
        g=lambda t, x: x[:, -1],
        meta=CoefficientMeta(state_dependent=True),
    )


def _dual_coefficients(pair: DualPairSpec) -> CoefficientSet:
    # Brownian forward state (x0 = 0): g reads W through x
    def f(t, r, x, y, z, z2):
        return pair.b(r, t) * y + pair.sigma(r, t) * z2[:, 0]

    return CoefficientSet(
        name=f"dual:{pair.name}",
        b=lambda t, r, x, y: 0.0,
        sigma=lambda t, r, x, y: 1.0,
        f=f,
        g=pair.g,
        meta=CoefficientMeta(lipschitz_y=1.0, lipschitz_z=1.0, state_dependent=True, type2=True),
    )


def duality_check(
    pair: DualPairSpec,
    grid: TimeGrid,
    bw: BrownianBatch,
    basis: BasisSpec | None = None,
    *,
    sigmas: float = 3.0,
) -> DualityResult:
    """E[Σ g(t_k) X_k Δ] against Σ eta_k E[Y_k] Δ with the type-II dual Y."""
    W = _scalar_paths(bw)
    basis = basis or BasisSpec()
    eta = np.array([pair.eta(grid.time(k)) for k in range(grid.N + 1)])
    dt = grid.dt

    fwd = simulate(state_linear(pair), grid, bw, eta)
    X = fwd.X.values
    G = np.column_stack([_per_path(pair.g(grid.time(k), W), bw.n_paths) for k in range(grid.N + 1)])
    left = np.sum(G * X, axis=1) * dt

    bm = simulate(_dual_coefficients(pair), grid, bw, 0.0)
    dual = solve_type2(_dual_coefficients(pair), bm, bw, basis)
    right = dual.Y.values @ eta * dt

    n = bw.n_paths
    lhs, rhs = float(left.mean()), float(np.dot(eta, dual.meanY) * dt)
    se = math.sqrt((left.var(ddof=1) + right.var(ddof=1)) / n) if n > 1 else 0.0
    residual = abs(lhs - rhs)
    passed = residual <= sigmas * se + 1e-8 * (1.0 + abs(lhs))
    log.info("duality '%s': lhs=%.6g rhs=%.6g residual=%.3g se=%.3g", pair.name, lhs, rhs, residual, se)
    return DualityResult(
        lhs=lhs,
        rhs=rhs,
        stderr=se,
        residual=residual,
        passed=passed,
        dual_mean=dual.meanY,
        forward_mean=X.mean(axis=0),
    )


def simulate_measure(eta, kernel: MeasureKernel, grid: TimeGrid, bw: BrownianBatch) -> np.ndarray:
    """Linear FSVIE whose kernels are node-weight measures on [0, s]."""
    _scalar_paths(bw)
    n, N, dt = bw.n_paths, grid.N, grid.dt
    nodes = grid.nodes
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (N + 1,))
    X = np.empty((n, N + 1))
    X[:, 0] = eta[0]
    for i in range(1, N + 1):
        t = grid.time(i)
        acc = np.full(n, eta[i])
        for k in range(i):
            s = grid.time(k)
            wb = kernel.b(t, s, nodes)[: k + 1]
            ws = kernel.sigma(t, s, nodes)[: k + 1]
            acc += (X[:, : k + 1] @ wb) * dt + (X[:, : k + 1] @ ws) * bw.increments[:, k, 0]
        X[:, i] = acc
    if not np.all(np.isfinite(X)):
        raise NumericalError("non-finite state in the measure-kernel pairing")
    return X


def measure_pairing(eta, g: Callable, kernel: MeasureKernel, grid: TimeGrid, bw: BrownianBatch) -> tuple[float, float]:
    """Forward side E[Σ g(t_k) X_k Δ] for measure kernels, with its standard error."""
    W = _scalar_paths(bw)
    X = simulate_measure(eta, kernel, grid, bw)
    G = np.column_stack([_per_path(g(grid.time(k), W), bw.n_paths) for k in range(grid.N + 1)])
    left = np.sum(G * X, axis=1) * grid.dt
    se = float(left.std(ddof=1) / math.sqrt(left.size)) if left.size > 1 else 0.0
    return float(left.mean()), se
