from __future__ import annotations

import logging
import math
import numbers
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from volterrafk.errors import ConfigError, ContractError, NumericalError
from volterrafk.parallel import chunks, map_ordered

log = logging.getLogger(__name__)

PATH_CHUNK = 4096


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = kT/N, k = 0..N."""

    T: float
    N: int

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.N + 1, dtype=float) * self.T / self.N
        t[-1] = self.T
        return t

    def time(self, k: int) -> float:
        if k == self.N:
            return float(self.T)
        return k * self.T / self.N

    def check_index(self, k: int, *, name: str = "index") -> int:
        if not 0 <= k <= self.N:
            raise ContractError(f"{name} {k} outside grid range 0..{self.N}")
        return int(k)


def make_grid(T: float, N: int) -> TimeGrid:
    if isinstance(T, bool) or not isinstance(T, numbers.Real) or not (math.isfinite(T) and T > 0):
        raise ConfigError("T must be > 0")
    if isinstance(N, bool) or not isinstance(N, numbers.Real) or not float(N).is_integer() or N < 1:
        raise ConfigError(f"N must be an integer ≥ 1, got {N!r}")
    return TimeGrid(T=float(T), N=int(N))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class BrownianBatch:
    grid: TimeGrid
    increments: np.ndarray  # (n_paths, N, d)
    seed: int
    antithetic: bool = False

    @property
    def n_paths(self) -> int:
        return int(self.increments.shape[0])

    @property
    def d(self) -> int:
        return int(self.increments.shape[2])

    def dW(self, k: int) -> np.ndarray:
        return self.increments[:, k, :]

    def paths(self) -> np.ndarray:
        """Cumulative W on the grid, shape (n_paths, N+1, d)."""
        w = np.zeros((self.n_paths, self.grid.N + 1, self.d))
        np.cumsum(self.increments, axis=1, out=w[:, 1:, :])
        return w

    def take(self, sl: slice) -> "BrownianBatch":
        return BrownianBatch(self.grid, self.increments[sl], self.seed, self.antithetic)


def path_stream(seed: int, p: int) -> np.random.Generator:
    """Counter-based stream for path p; independent of how paths are split."""
    key = np.array([seed % 2**64, 0], dtype=np.uint64)
    counter = np.array([0, 0, p, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def derive_seed(master: int, *keys: int) -> int:
    """Independent child seed for a nested run, fixed by (master, keys)."""
    seq = np.random.SeedSequence([master % 2**64, *keys])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def sample_brownian(
    grid: TimeGrid,
    n_paths: int,
    d: int = 1,
    seed: int = 0,
    *,
    antithetic: bool = False,
) -> BrownianBatch:
    if n_paths < 1:
        raise ConfigError("n_paths must be ≥ 1")
    if d < 1:
        raise ConfigError("d must be ≥ 1")
    scale = math.sqrt(grid.dt)
    N = grid.N

    def block(bounds: tuple[int, int]) -> np.ndarray:
        a, b = bounds
        out = np.empty((b - a, N, d))
        for p in range(a, b):
            out[p - a] = path_stream(seed, p).standard_normal((N, d))
        return out

    parts = map_ordered(block, chunks(n_paths, PATH_CHUNK))
    inc = np.concatenate(parts, axis=0) * scale
    if antithetic:
        inc = np.concatenate([inc, -inc], axis=0)
    return BrownianBatch(grid=grid, increments=_frozen(inc), seed=int(seed), antithetic=antithetic)


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Scalar state on the grid, values shape (n_paths, N+1).

    Nodes before `start` are unset (restarted backward solves) and hold NaN.
    """

    grid: TimeGrid
    values: np.ndarray
    start: int = 0

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.grid.N + 1:
            raise ContractError(
                f"path batch shape {self.values.shape} does not match grid with N={self.grid.N}"
            )
        live = self.values[:, self.start :]
        if not np.all(np.isfinite(live)):
            bad = np.argwhere(~np.isfinite(live))[0]
            raise NumericalError(f"non-finite path value at (path={bad[0]}, k={bad[1] + self.start})")

    @property
    def n_paths(self) -> int:
        return int(self.values.shape[0])


class Region(str, Enum):
    UPPER = "upper"  # entries (i, j) with j >= i
    LOWER = "lower"  # entries (i, j) with j <= i


@dataclass(eq=False)
class TwoTimeField:
    """Packed triangular (i, j) array per path.

    Row i of the UPPER region holds j = i..N contiguously; row i of the LOWER
    region holds j = 0..i. Trailing `tail` dims (e.g. Brownian dimension) are
    carried per entry.
    """

    region: Region
    n_paths: int
    N: int
    tail: tuple[int, ...] = ()
    data: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        self.region = Region(self.region)
        size = (self.N + 1) * (self.N + 2) // 2
        if self.data is None:
            self.data = np.zeros((self.n_paths, size, *self.tail))
        elif self.data.shape != (self.n_paths, size, *self.tail):
            raise ContractError(
                f"packed data shape {self.data.shape} != {(self.n_paths, size, *self.tail)}"
            )

    @property
    def size(self) -> int:
        return (self.N + 1) * (self.N + 2) // 2

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    @staticmethod
    def estimate_bytes(n_paths: int, N: int, tail: tuple[int, ...] = ()) -> int:
        return 8 * n_paths * (N + 1) * (N + 2) // 2 * int(np.prod(tail, dtype=int))

    def _offset(self, i: int) -> int:
        if self.region is Region.UPPER:
            return i * (self.N + 1) - i * (i - 1) // 2
        return i * (i + 1) // 2

    def inside(self, i: int, j: int) -> bool:
        if not (0 <= i <= self.N and 0 <= j <= self.N):
            return False
        return j >= i if self.region is Region.UPPER else j <= i

    def index(self, i: int, j: int) -> int:
        if not self.inside(i, j):
            raise ContractError(f"entry ({i}, {j}) is outside the {self.region.value} region (N={self.N})")
        if self.region is Region.UPPER:
            return self._offset(i) + (j - i)
        return self._offset(i) + j

    def get(self, i: int, j: int) -> np.ndarray:
        return self.data[:, self.index(i, j)]

    def set(self, i: int, j: int, value) -> None:
        self.data[:, self.index(i, j)] = value

    def _row_slice(self, i: int) -> slice:
        if not 0 <= i <= self.N:
            raise ContractError(f"row {i} outside 0..{self.N}")
        a = self._offset(i)
        n = self.N + 1 - i if self.region is Region.UPPER else i + 1
        return slice(a, a + n)

    def row(self, i: int) -> np.ndarray:
        """UPPER: entries j = i..N; LOWER: entries j = 0..i."""
        return self.data[:, self._row_slice(i)]

    def set_row(self, i: int, values) -> None:
        self.data[:, self._row_slice(i)] = values

    def column(self, j: int) -> np.ndarray:
        """UPPER: entries i = 0..j; LOWER: entries i = j..N."""
        if not 0 <= j <= self.N:
            raise ContractError(f"column {j} outside 0..{self.N}")
        rows = range(0, j + 1) if self.region is Region.UPPER else range(j, self.N + 1)
        return self.data[:, [self.index(i, j) for i in rows]]

    def diagonal(self) -> np.ndarray:
        return self.data[:, [self.index(i, i) for i in range(self.N + 1)]]

    def _coords(self) -> tuple[np.ndarray, np.ndarray]:
        rows, cols = [], []
        for i in range(self.N + 1):
            js = range(i, self.N + 1) if self.region is Region.UPPER else range(0, i + 1)
            rows.extend([i] * len(js))
            cols.extend(js)
        return np.asarray(rows), np.asarray(cols)

    def to_dense(self, fill: float = np.nan) -> np.ndarray:
        out = np.full((self.n_paths, self.N + 1, self.N + 1, *self.tail), fill)
        r, c = self._coords()
        out[:, r, c] = self.data
        return out

    @classmethod
    def from_dense(cls, region: Region, dense: np.ndarray) -> "TwoTimeField":
        n, n1 = dense.shape[0], dense.shape[1]
        f = cls(region, n, n1 - 1, tuple(dense.shape[3:]))
        r, c = f._coords()
        f.data[...] = dense[:, r, c]
        return f

    def take(self, sl: slice) -> "TwoTimeField":
        data = self.data[sl]
        return TwoTimeField(self.region, data.shape[0], self.N, self.tail, data)

    def freeze(self) -> "TwoTimeField":
        self.data.flags.writeable = False
        return self
