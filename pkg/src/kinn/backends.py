"""Concurrency limits for external backends.

Every backend may expose ``max_parallel``: ``None`` (or absent) means any
number of concurrent calls is fine, ``1`` means serial-only. Calls routed
through :func:`call` never exceed the declared limit, no matter how many
worker threads the caller spins up.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from typing import Any, Callable, Iterator, TypeVar

T = TypeVar("T")

_lock = threading.Lock()
_gates: "weakref.WeakKeyDictionary[Any, threading.BoundedSemaphore]" = weakref.WeakKeyDictionary()
_fallback_gates: dict[int, threading.BoundedSemaphore] = {}


def parallelism(backend: Any) -> int | None:
    limit = getattr(backend, "max_parallel", None)
    if limit is None:
        return None
    limit = int(limit)
    if limit < 1:
        raise ValueError(f"max_parallel must be >= 1, got {limit}")
    return limit


def _gate(backend: Any) -> threading.BoundedSemaphore | None:
    limit = parallelism(backend)
    if limit is None:
        return None
    with _lock:
        try:
            sem = _gates.get(backend)
            if sem is None:
                sem = _gates[backend] = threading.BoundedSemaphore(limit)
        except TypeError:
            # not weak-referenceable
            sem = _fallback_gates.setdefault(id(backend), threading.BoundedSemaphore(limit))
    return sem


@contextmanager
def slot(backend: Any) -> Iterator[None]:
    sem = _gate(backend)
    if sem is None:
        yield
        return
    with sem:
        yield


def call(backend: Any, fn: Callable[..., T], *args: Any, **kwargs: Any) -> T:
    """Invoke ``fn`` while holding one of ``backend``'s parallelism slots."""
    with slot(backend):
        return fn(*args, **kwargs)


def worker_count(*backends: Any, default: int = 4) -> int:
    """Largest useful thread count given the backends a job touches."""
    limits = [p for p in (parallelism(b) for b in backends if b is not None) if p is not None]
    if not limits:
        return default
    return max(1, min(min(limits), default))
