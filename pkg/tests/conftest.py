import threading

import pytest

from gridmon.clock import Clock, ManualClock


@pytest.fixture
def manual_clock():
    return ManualClock(start_ms=1_000_000)


@pytest.fixture
def fast_clock():
    """Real clock compressed 10x; keeps integration tests quick."""
    return Clock(scale=10.0)


def wait_until(predicate, timeout_s=10.0, interval_s=0.01):
    """Poll until predicate() is truthy; returns its last value."""
    import time

    end = time.monotonic() + timeout_s
    value = predicate()
    while not value and time.monotonic() < end:
        time.sleep(interval_s)
        value = predicate()
    return value
