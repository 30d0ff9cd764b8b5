"""Call accounting for the training-time reward apparatus.

Every entry point of the embedding, detector and describer code bumps a
shared counter. Evaluation runs snapshot the counter before and after and
assert that nothing moved.
"""
from __future__ import annotations

import functools
import threading
from collections import Counter


class ApparatusCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self._counts: Counter[str] = Counter()

    def bump(self, name: str) -> None:
        with self._lock:
            self._counts[name] += 1

    def total(self) -> int:
        with self._lock:
            return sum(self._counts.values())

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()


COUNTER = ApparatusCounter()


def counted(name: str):
    """Decorator: count each call of the wrapped apparatus function."""

    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            COUNTER.bump(name)
            return fn(*args, **kwargs)

        return inner

    return wrap
