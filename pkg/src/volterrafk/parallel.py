from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

from volterrafk.errors import ConfigError

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "VOLTERRA_FK_THREADS"

_pinned: int | None = None


def pin_workers(n: int | None):
    """Fix the worker count for this process (the CLI pins it from config)."""
    global _pinned
    if n is not None and n < 1:
        raise ConfigError(f"worker count must be ≥ 1, got {n}")
    _pinned = n


def worker_count() -> int:
    if _pinned is not None:
        cap = _pinned
    else:
        cap = os.cpu_count() or 1
    raw = (os.environ.get(THREADS_ENV) or "").strip()
    if raw:
        try:
            env_cap = int(raw)
        except ValueError:
            log.warning("ignoring %s=%r (not an integer)", THREADS_ENV, raw)
        else:
            if env_cap >= 1:
                cap = min(cap, env_cap)
    return max(1, cap)


def chunks(n: int, size: int) -> list[tuple[int, int]]:
    size = max(1, int(size))
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def map_ordered(fn: Callable[[T], R], items: Sequence[T] | Iterable[T]) -> list[R]:
    """Apply fn to every item, results in input order.

    Work items must not share mutable state; output never depends on the
    number of workers.
    """
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
