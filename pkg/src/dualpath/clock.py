"""Clocks used to charge simulated detector and describer latency."""
from __future__ import annotations

import time


class VirtualClock:
    """Accumulates charged seconds without sleeping."""

    def __init__(self):
        self.elapsed = 0.0
        self.charges: dict[str, float] = {}

    def charge(self, label: str, seconds: float) -> None:
        self.elapsed += seconds
        self.charges[label] = self.charges.get(label, 0.0) + seconds


class BusyWaitClock(VirtualClock):
    """Spins for the charged duration so wall time can be measured."""

    def charge(self, label: str, seconds: float) -> None:
        end = time.perf_counter() + seconds
        while time.perf_counter() < end:
            pass
        super().charge(label, seconds)
