"""Deterministic worker-pool helper honoring the FLOWADAPT_THREADS cap."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

ENV_VAR = "FLOWADAPT_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Requested worker cap; defaults to hardware parallelism."""
    raw = os.environ.get(ENV_VAR)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"{ENV_VAR} must be >= 1, got {n}")
    return n


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Map over independent items, results in input order.

    Each item is computed by a pure call, so output is bitwise identical to
    a serial map regardless of worker count or scheduling.
    """
    values = list(items)
    workers = min(worker_count(), len(values))
    if workers <= 1:
        return [fn(v) for v in values]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, values))
