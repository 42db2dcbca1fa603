from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from volterrafk.errors import ConfigError, ContractError
from volterrafk.grid import TimeGrid

# Coefficient callables are vectorized over paths:
#   b(t, r, x, y)            -> (n,)      x: prefix (n, k+1) of the path up to r = t_k
#   sigma(t, r, x, y)        -> (n, d)    y: (n,) diagonal backward value, or None
#   f(t, r, x, y, z, z2)     -> (n,)      z, z2: (n, d); z2 is None unless type2
#   g(t, x)                  -> (n,)      x: full path (n, N+1)
Fn = Callable[..., Any]


def as_paths(v, n: int) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return np.full(n, float(a))
    return a.reshape(n)


def as_paths_d(v, n: int, d: int) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return np.full((n, d), float(a))
    if a.ndim == 1:
        if a.shape[0] == n:
            a = a[:, None]
        elif a.shape[0] == d:
            a = a[None, :]
    return np.broadcast_to(a, (n, d))


@dataclass(frozen=True)
class CoefficientMeta:
    lipschitz_y: float = 0.0
    lipschitz_z: float = 0.0
    monotone_in_y: bool = False
    state_dependent: bool = False
    type2: bool = False
    coupled: bool = False
    singular_kernel: bool = False


@dataclass(frozen=True)
class DerivativeWeights:
    """First-order weights in the degenerate (Dirac at r) reading.

    db/dsigma/df_* take the state value x_r (n,) instead of a prefix; dg
    returns a node-weight vector (n, N+1) for the measure Dg(t, x).
    """

    db: Fn  # db(t, r, xr, y) -> (n,)
    dsigma: Fn  # dsigma(t, r, xr, y) -> (n, d)
    df_x: Fn  # df_x(t, r, xr, y, z) -> (n,)
    df_y: Fn
    df_z: Fn  # -> (n, d)
    dg: Fn  # dg(t, x_full) -> (n, N+1)
    analytic: bool = True


@dataclass(frozen=True)
class CoefficientSet:
    name: str
    b: Fn
    sigma: Fn
    f: Fn
    g: Fn
    meta: CoefficientMeta = field(default_factory=CoefficientMeta)
    d: int = 1
    params: Mapping[str, Any] = field(default_factory=dict)
    derivatives: DerivativeWeights | None = None

    def eval_b(self, t: float, r: float, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
        return as_paths(self.b(t, r, x, y), x.shape[0])

    def eval_sigma(self, t: float, r: float, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
        return as_paths_d(self.sigma(t, r, x, y), x.shape[0], self.d)

    def eval_f(self, t, r, x, y, z, z2=None) -> np.ndarray:
        if not self.meta.type2:
            z2 = None
        return as_paths(self.f(t, r, x, y, z, z2), x.shape[0])

    def eval_g(self, t: float, x: np.ndarray) -> np.ndarray:
        return as_paths(self.g(t, x), x.shape[0])


@dataclass(frozen=True)
class KernelSpec:
    """Deterministic Volterra kernel K(t, r) used as sigma(t, r)."""

    kind: str = "fractional"
    H: float = 0.5
    c: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in {"fractional", "exponential", "constant"}:
            raise ConfigError(f"Unknown kernel kind: {self.kind} (choose from fractional, exponential, constant)")
        if self.kind == "fractional" and not 0.0 < self.H < 1.0:
            raise ConfigError("H must lie in (0,1)")

    @property
    def singular(self) -> bool:
        return self.kind == "fractional" and self.H < 0.5

    def __call__(self, t: float, r: float) -> float:
        u = t - r
        if u < 0:
            return 0.0
        if self.kind == "constant":
            return self.c
        if self.kind == "exponential":
            return self.c * math.exp(-self.lam * u)
        if u == 0.0:
            # left-endpoint rule: the diagonal cell never enters the Euler sums
            return self.c if self.H == 0.5 else 0.0
        return self.c * u ** (self.H - 0.5)

    @staticmethod
    def parse(text: str) -> "KernelSpec":
        m = re.match(r"^\s*(\w+)\s*(?::\s*(.*))?$", text)
        if not m:
            raise ConfigError('Invalid kernel. Use like "fractional:H=0.3,c=1".')
        kw: dict[str, Any] = {"kind": m.group(1)}
        for part in filter(None, (m.group(2) or "").split(",")):
            key, _, val = part.partition("=")
            key = key.strip()
            if key not in {"H", "c", "lam"}:
                raise ConfigError(f"Unknown kernel parameter: {key}")
            try:
                kw[key] = float(val)
            except ValueError:
                raise ConfigError(f"Invalid kernel parameter {key}={val.strip()!r}") from None
        return KernelSpec(**kw)


@dataclass(frozen=True)
class LinearBSVIESpec:
    """Y_t = xi_t + int_t^T [alpha(t,r) Y_r + beta(t,r) Z^t_r] dr - int_t^T Z^t_r dW_r.

    alpha(t, r, w) and beta(t, r, w) read the Brownian prefix w (n, k+1);
    xi(t, w) reads the full Brownian path (n, N+1).
    """

    name: str
    alpha: Fn
    beta: Fn
    xi: Fn
    deterministic_coefficients: bool = False
    deterministic_xi: bool = False
    bound: float = 1.0e6
    exact: Callable[[float, float], float] | None = None  # exact(t, T) -> E[Y_t]

    def coefficient_set(self) -> CoefficientSet:
        alpha, beta, xi = self.alpha, self.beta, self.xi

        def f(t, r, x, y, z, z2):
            n = x.shape[0]
            bz = as_paths_d(beta(t, r, x), n, z.shape[1])
            return as_paths(alpha(t, r, x), n) * y + np.sum(bz * z, axis=1)

        return CoefficientSet(
            name=f"linear-volterra:{self.name}",
            b=lambda t, r, x, y: 0.0,
            sigma=lambda t, r, x, y: 1.0,
            f=f,
            g=lambda t, x: xi(t, x),
            meta=CoefficientMeta(lipschitz_y=self.bound, lipschitz_z=self.bound),
            params={"spec": self.name},
        )


def _prefix(xr: np.ndarray) -> np.ndarray:
    return np.asarray(xr, dtype=float)[:, None]


def finite_difference_weights(coeffs: CoefficientSet, grid: TimeGrid, h: float = 1.0e-5) -> DerivativeWeights:
    """Central differences for state-dependent coefficients."""
    c = coeffs

    def db(t, r, xr, y):
        return (c.eval_b(t, r, _prefix(xr + h), y) - c.eval_b(t, r, _prefix(xr - h), y)) / (2 * h)

    def dsigma(t, r, xr, y):
        return (c.eval_sigma(t, r, _prefix(xr + h), y) - c.eval_sigma(t, r, _prefix(xr - h), y)) / (2 * h)

    def df_x(t, r, xr, y, z):
        return (c.eval_f(t, r, _prefix(xr + h), y, z) - c.eval_f(t, r, _prefix(xr - h), y, z)) / (2 * h)

    def df_y(t, r, xr, y, z):
        return (c.eval_f(t, r, _prefix(xr), y + h, z) - c.eval_f(t, r, _prefix(xr), y - h, z)) / (2 * h)

    def df_z(t, r, xr, y, z):
        out = np.empty_like(np.asarray(z, dtype=float))
        for j in range(out.shape[1]):
            e = np.zeros(out.shape[1])
            e[j] = h
            out[:, j] = (c.eval_f(t, r, _prefix(xr), y, z + e) - c.eval_f(t, r, _prefix(xr), y, z - e)) / (2 * h)
        return out

    def dg(t, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for k in range(x.shape[1]):
            up, dn = x.copy(), x.copy()
            up[:, k] += h
            dn[:, k] -= h
            out[:, k] = (c.eval_g(t, up) - c.eval_g(t, dn)) / (2 * h)
        return out

    return DerivativeWeights(db, dsigma, df_x, df_y, df_z, dg, analytic=False)


def derivative_weights(coeffs: CoefficientSet, grid: TimeGrid) -> DerivativeWeights:
    if coeffs.derivatives is not None:
        return coeffs.derivatives
    if not coeffs.meta.state_dependent:
        raise ContractError(
            f"coefficients '{coeffs.name}' are path-dependent and supply no Fréchet data; "
            "derivative weights are only available in the state-dependent case"
        )
    return finite_difference_weights(coeffs, grid)


def _sample_times(grid: TimeGrid, rng: np.random.Generator, n: int) -> list[tuple[int, int, int]]:
    """Index triples i <= k <= j with k < N.

    k is the integration node r; b and sigma are read at (t_j, t_k) and the
    driver f at (t_i, t_k), each on its own side of the diagonal.
    """
    out = []
    for _ in range(n):
        k = int(rng.integers(0, grid.N))
        out.append((int(rng.integers(0, k + 1)), k, int(rng.integers(k, grid.N + 1))))
    return out


def probe_adaptedness(coeffs: CoefficientSet, grid: TimeGrid, rng: np.random.Generator, n_pairs: int = 64) -> bool:
    """b, sigma, f agree on path pairs that coincide on [0, r]."""
    for i, k, j in _sample_times(grid, rng, 8):
        base = rng.standard_normal((n_pairs, grid.N + 1))
        other = base.copy()
        other[:, k + 1 :] = rng.standard_normal((n_pairs, grid.N - k))
        t_fwd, t_bwd, r = grid.time(j), grid.time(i), grid.time(k)
        y = rng.standard_normal(n_pairs)
        z = rng.standard_normal((n_pairs, coeffs.d))
        xa, xb = base[:, : k + 1], other[:, : k + 1]
        pairs = [
            (coeffs.eval_b(t_fwd, r, xa, y), coeffs.eval_b(t_fwd, r, xb, y)),
            (coeffs.eval_sigma(t_fwd, r, xa, y), coeffs.eval_sigma(t_fwd, r, xb, y)),
            (coeffs.eval_f(t_bwd, r, xa, y, z, z), coeffs.eval_f(t_bwd, r, xb, y, z, z)),
        ]
        if not all(np.array_equal(a, b) for a, b in pairs):
            return False
    return True


def probe_monotonicity(coeffs: CoefficientSet, grid: TimeGrid, rng: np.random.Generator, n: int = 256) -> bool:
    if not coeffs.meta.monotone_in_y:
        return True
    for i, k, _ in _sample_times(grid, rng, 8):
        t, r = grid.time(i), grid.time(k)
        x = rng.standard_normal((n, k + 1))
        y1 = rng.standard_normal(n)
        y2 = y1 + np.abs(rng.standard_normal(n))
        z = rng.standard_normal((n, coeffs.d))
        if np.any(coeffs.eval_f(t, r, x, y2, z, z) < coeffs.eval_f(t, r, x, y1, z, z) - 1e-12):
            return False
    return True


def check_derivatives(
    coeffs: CoefficientSet,
    weights: DerivativeWeights,
    grid: TimeGrid,
    rng: np.random.Generator,
    *,
    h: float = 1.0e-5,
    n: int = 32,
) -> float:
    """Largest relative gap between the weights and central differences."""
    fd = finite_difference_weights(coeffs, grid, h)
    worst = 0.0

    def gap(a, b):
        a, b = np.asarray(a, float), np.asarray(b, float)
        return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))

    for i, k, j in _sample_times(grid, rng, 6):
        t_fwd, t_bwd, r = grid.time(j), grid.time(i), grid.time(k)
        xr = rng.standard_normal(n)
        y = rng.standard_normal(n)
        z = rng.standard_normal((n, coeffs.d))
        worst = max(
            worst,
            gap(weights.db(t_fwd, r, xr, y), fd.db(t_fwd, r, xr, y)),
            gap(as_paths_d(weights.dsigma(t_fwd, r, xr, y), n, coeffs.d), fd.dsigma(t_fwd, r, xr, y)),
            gap(weights.df_x(t_bwd, r, xr, y, z), fd.df_x(t_bwd, r, xr, y, z)),
            gap(weights.df_y(t_bwd, r, xr, y, z), fd.df_y(t_bwd, r, xr, y, z)),
            gap(as_paths_d(weights.df_z(t_bwd, r, xr, y, z), n, coeffs.d), fd.df_z(t_bwd, r, xr, y, z)),
        )
    x = rng.standard_normal((4, grid.N + 1))
    for t in (0.0, grid.T):
        worst = max(worst, gap(weights.dg(t, x), fd.dg(t, x)))
    return worst
