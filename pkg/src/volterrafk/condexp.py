from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import scipy.linalg

from volterrafk.errors import ConfigError, ContractError, RegressionError

log = logging.getLogger(__name__)

COND_LIMIT = 1.0e12


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial features of X_{t_k} and the X̃ row at geometric pivots."""

    degree: int = 2
    pivots: int = 4
    ridge: float = 1.0e-8
    include_constant: bool = True
    cross: bool = True

    def __post_init__(self):
        if self.degree < 0:
            raise ConfigError("basis degree must be ≥ 0")
        if self.pivots < 0:
            raise ConfigError("basis pivots must be ≥ 0")
        if self.ridge < 0:
            raise ConfigError("ridge must be ≥ 0")

    def pivot_nodes(self, k: int, N: int) -> list[int]:
        if k >= N or self.pivots == 0:
            return []
        raw = np.geomspace(1, N - k, self.pivots)
        return sorted({k + int(round(o)) for o in raw})

    def expand(self, raw: np.ndarray) -> np.ndarray:
        """Powers up to `degree` of every raw column plus pairwise products."""
        n, c = raw.shape
        cols = [raw[:, a] ** p for a in range(c) for p in range(1, self.degree + 1)]
        if self.cross and self.degree >= 2:
            cols += [raw[:, a] * raw[:, b] for a, b in combinations(range(c), 2)]
        if not cols:
            return np.empty((n, 0))
        return np.column_stack(cols)


def raw_state(basis: BasisSpec, X: np.ndarray, Xtilde, k: int) -> np.ndarray:
    N = X.shape[1] - 1
    cols = [X[:, k]] + [Xtilde.get(k, j) for j in basis.pivot_nodes(k, N)]
    return np.column_stack(cols)


def features(basis: BasisSpec, fwd, k: int) -> np.ndarray:
    """Feature matrix (n_paths, m) of the information at t_k."""
    return basis.expand(raw_state(basis, fwd.X.values, fwd.Xtilde, k))


@dataclass(frozen=True, eq=False)
class RegressionFit:
    coef_std: np.ndarray  # (p, r) on the standardized design
    mean: np.ndarray  # (m,)
    scale: np.ndarray  # (m,)
    keep: np.ndarray  # (m,) bool
    intercept: bool
    resid_sd: np.ndarray  # (r,)
    fitted: np.ndarray  # (n,) or (n, r)
    n: int
    cond: float
    method: str

    @property
    def n_features(self) -> int:
        return int(self.keep.size)

    @property
    def n_params(self) -> int:
        return int(self.coef_std.shape[0])

    @property
    def coef(self) -> np.ndarray:
        """Slopes in the original feature units, zero for dropped columns."""
        b = self.coef_std[1:] if self.intercept else self.coef_std
        out = np.zeros((self.n_features, b.shape[1]))
        out[self.keep] = b / self.scale[self.keep, None]
        return out.squeeze(-1) if out.shape[1] == 1 else out

    @property
    def stderr(self) -> np.ndarray:
        """Heuristic standard error of an in-sample prediction."""
        return math.sqrt(self.n_params / self.n) * self.resid_sd


def _check_finite(a: np.ndarray, what: str, cell) -> None:
    if not np.all(np.isfinite(a)):
        raise RegressionError(f"non-finite {what}", cell=cell)


class Design:
    """Standardized design matrix and its factorization for one time cell.

    Every target regressed on the same features reuses the factorization.
    """

    def __init__(self, feats: np.ndarray, ridge: float = 1.0e-8, *, intercept: bool = True, cell=None):
        feats = np.asarray(feats, dtype=float)
        if feats.ndim != 2:
            raise ContractError(f"features must be a matrix, got shape {feats.shape}")
        _check_finite(feats, "features", cell)
        n, m = feats.shape
        if n <= m + int(intercept):
            raise RegressionError(f"{n} paths cannot fit {m} features", cell=cell)
        self.cell = cell
        self.intercept = intercept
        self.n = n
        self.mean = feats.mean(axis=0) if intercept else np.zeros(m)
        self.scale = feats.std(axis=0) if intercept else np.sqrt(np.mean(feats**2, axis=0))
        self.keep = self.scale > 1e-12 * np.maximum(1.0, np.abs(self.mean))
        Z = (feats[:, self.keep] - self.mean[self.keep]) / self.scale[self.keep]
        self.D = np.column_stack([np.ones(n), Z]) if intercept else Z
        p = self.D.shape[1]
        penalty = np.full(p, ridge)
        if intercept:
            penalty[0] = 0.0
        A = self.D.T @ self.D + np.diag(penalty * n)
        self.cond = float(np.linalg.cond(A)) if p else 1.0
        self._chol = None
        self._pinv = None
        if p and self.cond < COND_LIMIT:
            try:
                self._chol = scipy.linalg.cho_factor(A)
            except np.linalg.LinAlgError:
                self._chol = None
        if p and self._chol is None:
            log.debug("ill-conditioned design at cell %s (cond=%.3g), using pinv", cell, self.cond)
            self._pinv = scipy.linalg.pinv(self.D)
        self.method = "cholesky" if self._chol is not None else "pinv"

    @property
    def n_params(self) -> int:
        return int(self.D.shape[1])

    def solve(self, targets: np.ndarray) -> RegressionFit:
        y = np.asarray(targets, dtype=float)
        single = y.ndim == 1
        y2 = y[:, None] if single else y
        if y2.shape[0] != self.n:
            raise ContractError(f"targets have {y2.shape[0]} rows, design has {self.n}")
        _check_finite(y2, "regression targets", self.cell)
        p = self.n_params
        flat = np.ptp(y2, axis=0) == 0.0
        coef = np.zeros((p, y2.shape[1]))
        if p and not np.all(flat):
            live = ~flat
            if self._chol is not None:
                coef[:, live] = scipy.linalg.cho_solve(self._chol, self.D.T @ y2[:, live])
            else:
                coef[:, live] = self._pinv @ y2[:, live]
        fitted = self.D @ coef if p else np.zeros_like(y2)
        if np.any(flat):
            # constant targets are returned exactly
            if self.intercept:
                coef[:, flat] = 0.0
                coef[0, flat] = y2[0, flat]
            fitted[:, flat] = y2[0, flat]
        if not np.all(np.isfinite(coef)):
            raise RegressionError("regression produced non-finite coefficients", cell=self.cell)
        dof = max(1, self.n - p)
        resid_sd = np.sqrt(np.sum((y2 - fitted) ** 2, axis=0) / dof)
        return RegressionFit(
            coef_std=coef,
            mean=self.mean,
            scale=self.scale,
            keep=self.keep,
            intercept=self.intercept,
            resid_sd=resid_sd,
            fitted=fitted[:, 0] if single else fitted,
            n=self.n,
            cond=self.cond,
            method=self.method,
        )


def fit(
    feats: np.ndarray,
    targets: np.ndarray,
    ridge: float = 1.0e-8,
    *,
    intercept: bool = True,
    cell: tuple[int, int] | None = None,
) -> RegressionFit:
    """Ridge least squares of targets on features (intercept unpenalized)."""
    return Design(feats, ridge, intercept=intercept, cell=cell).solve(targets)


def project(fitted: RegressionFit, feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 2 or feats.shape[1] != fitted.n_features:
        raise ContractError(f"features of shape {feats.shape} do not match a fit on {fitted.n_features} features")
    Z = (feats[:, fitted.keep] - fitted.mean[fitted.keep]) / fitted.scale[fitted.keep]
    D = np.column_stack([np.ones(feats.shape[0]), Z]) if fitted.intercept else Z
    out = D @ fitted.coef_std
    return out[:, 0] if out.shape[1] == 1 else out
