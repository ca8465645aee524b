"""Scenario clocks.

Every service takes a Clock instead of touching time.time() directly, so a
whole deployment can run against wall time (scale=1) or compressed time for
tests (scale=10 runs every period, deadline and window ten times faster
while keeping all ratios intact). Durations everywhere in this package are
scenario milliseconds unless a name says otherwise.
"""
from __future__ import annotations

import threading
import time


class Clock:
    """Monotonic + epoch clock with a wall-time scale factor."""

    # monotonic time starts an hour in, so subtracting any sane RTT or
    # timeout from "now" can never go negative
    MONO_ORIGIN_MS = 3_600_000.0

    def __init__(self, scale: float = 1.0, epoch0_ms: float | None = None):
        if scale <= 0:
            raise ValueError("clock scale must be > 0")
        self.scale = float(scale)
        self._wall0 = time.monotonic()
        # a fixed epoch origin makes scenario timestamps reproducible
        self._epoch0 = time.time() * 1000.0 if epoch0_ms is None else float(epoch0_ms)

    def monotonic_ms(self) -> float:
        return self.MONO_ORIGIN_MS + (time.monotonic() - self._wall0) * 1000.0 * self.scale

    def monotonic_ns(self) -> int:
        return int(self.monotonic_ms() * 1e6)

    def now_ms(self) -> int:
        """Scenario epoch time in milliseconds."""
        return int(self._epoch0 + self.monotonic_ms() - self.MONO_ORIGIN_MS)

    def sleep(self, ms: float) -> None:
        if ms > 0:
            time.sleep(ms / 1000.0 / self.scale)

    def wall_seconds(self, ms: float) -> float:
        """Scenario duration -> wall-clock seconds (socket timeouts, waits)."""
        return max(ms, 0.0) / 1000.0 / self.scale

    def wait(self, event: threading.Event, timeout_ms: float) -> bool:
        return event.wait(self.wall_seconds(timeout_ms))


class ManualClock(Clock):
    """Deterministic clock for single-threaded unit tests.

    Time only moves when advance() is called; sleep() advances it, so code
    under test that sleeps does not stall the test.
    """

    def __init__(self, start_ms: int = 0):
        super().__init__(scale=1.0)
        self._now = float(start_ms)

    def monotonic_ms(self) -> float:
        return self._now

    def monotonic_ns(self) -> int:
        return int(self._now * 1e6)

    def now_ms(self) -> int:
        return int(self._now)

    def advance(self, ms: float) -> None:
        self._now += ms

    def sleep(self, ms: float) -> None:
        if ms > 0:
            self._now += ms

    def wall_seconds(self, ms: float) -> float:
        # Waits against a manual clock should never block the test runner.
        return 0.0
