"""Action agents that watch targets, restart them, and escalate.

Each watch runs a periodic health check against its target. On the first
failure the configured actuator is asked to restart it; if the target is
still failing at the next check that counts as a failed restart attempt.
Two consecutive failed attempts escalate: exactly one alert goes to the
notifier and restarts stay frozen until the target recovers on its own or
the watch is reset by hand.

Watch specs carry the same keyed-hash signature as filter specs; a spec
that does not verify is refused, so its actuator can never run.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .clock import Clock
from .signing import canonical_json, verify


class Status(str, Enum):
    OK = "OK"
    FAILED = "FAILED"
    RESTARTING = "RESTARTING"
    ESCALATED = "ESCALATED"


CHECK_OK = True
CHECK_FAILED = False

# health checker: (target, deadline_ms) -> bool; actuator: (target) -> None
HealthCheck = Callable[[str, int], bool]
Actuator = Callable[[str], None]
Notifier = Callable[[dict], None]


@dataclass(frozen=True)
class WatchSpec:
    target: str
    period_ms: int
    deadline_ms: int
    actuator: str = "sim-restart"
    notifier: str = "log"

    def __post_init__(self):
        if self.period_ms <= self.deadline_ms:
            raise ValueError("check period must exceed the check deadline")

    def signable(self) -> bytes:
        return canonical_json({
            "target": self.target, "period_ms": self.period_ms,
            "deadline_ms": self.deadline_ms, "actuator": self.actuator,
            "notifier": self.notifier,
        })


@dataclass
class Alert:
    target: str
    reason: str
    attempts: list[int]
    at: int
    delivered_to: list[str] = field(default_factory=list)

    def to_wire(self) -> dict:
        return {"target": self.target, "reason": self.reason,
                "attempts": self.attempts, "at": self.at}


class AlertLog:
    """Default notifier: one JSON object per line, append-only."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.alerts: list[dict] = []
        self._lock = threading.Lock()

    def __call__(self, alert: dict) -> None:
        with self._lock:
            self.alerts.append(alert)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(alert, separators=(",", ":")) + "\n")


class WebhookNotifier:
    """POSTs the alert object; meant to be chained after an AlertLog."""

    def __init__(self, url: str, timeout_s: float = 5.0):
        self.url = url
        self.timeout_s = timeout_s

    def __call__(self, alert: dict) -> None:
        import urllib.request

        req = urllib.request.Request(
            self.url, data=json.dumps(alert).encode("utf-8"),
            headers={"Content-Type": "application/json"}, method="POST")
        urllib.request.urlopen(req, timeout=self.timeout_s).close()


class _Watch:
    def __init__(self, spec: WatchSpec, first_due: int):
        self.spec = spec
        self.status = Status.OK
        self.restart_failures = 0          # consecutive failed restart attempts
        self.attempt_times: list[int] = []
        self.next_check = first_due
        self.history: list[tuple[int, Status]] = []
        self.alerts_sent = 0
        self.pending_alert: Optional[dict] = None
        self.notify_backoff_ms = 0
        self.notify_next_try = 0


class SignatureError(Exception):
    pass


class Supervisor:
    """Drives all watches; one state machine per target, ticked together.

    Checks for distinct targets are independent; a target's transitions
    are serialized by construction (tick processes each watch once).
    """

    MAX_RESTART_FAILURES = 2

    def __init__(self, clock: Clock, trust_key: Optional[str] = None):
        self.clock = clock
        self.trust_key = trust_key
        self._lock = threading.Lock()
        self._watches: dict[str, _Watch] = {}
        self._checkers: dict[str, HealthCheck] = {}
        self._actuators: dict[str, Actuator] = {}
        self._notifiers: dict[str, Notifier] = {"log": AlertLog()}
        self.alerts: list[Alert] = []
        self.restarts_attempted = 0
        self.audit: list[dict] = []
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    # ------------------------------------------------------------ wiring

    def register_actuator(self, name: str, fn: Actuator) -> None:
        self._actuators[name] = fn

    def register_notifier(self, name: str, fn: Notifier) -> None:
        self._notifiers[name] = fn

    def register_checker(self, target: str, fn: HealthCheck) -> None:
        self._checkers[target] = fn

    def alert_log(self) -> AlertLog:
        return self._notifiers["log"]  # type: ignore[return-value]

    def add_watch(self, spec: WatchSpec, signature: Optional[str] = None) -> None:
        """Activate a watch; with a trust key configured, the spec must verify."""
        if self.trust_key is not None:
            if not verify(self.trust_key, spec.signable(), signature or ""):
                self.audit.append({"event": "watch_rejected", "target": spec.target,
                                   "reason": "bad signature",
                                   "at": self.clock.now_ms()})
                raise SignatureError(f"watch for {spec.target}: signature does not verify")
        with self._lock:
            self._watches[spec.target] = _Watch(spec, self.clock.now_ms())

    def remove_watch(self, target: str) -> None:
        with self._lock:
            self._watches.pop(target, None)

    def reset(self, target: str) -> None:
        """Manual reset: closes an escalated episode without target recovery."""
        with self._lock:
            w = self._watches.get(target)
            if w:
                w.status = Status.OK
                w.restart_failures = 0
                w.attempt_times = []

    def status(self, target: str) -> Optional[Status]:
        with self._lock:
            w = self._watches.get(target)
            return w.status if w else None

    # ------------------------------------------------------------ engine

    def start(self) -> None:
        self._thread = threading.Thread(target=self._loop, name="supervisor",
                                        daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=2)

    def _loop(self) -> None:
        while not self._stop.is_set():
            self.tick(self.clock.now_ms())
            with self._lock:
                period = min((w.spec.period_ms for w in self._watches.values()),
                             default=500)
            self.clock.sleep(period / 4)

    def tick(self, now: int) -> None:
        with self._lock:
            due = [w for w in self._watches.values() if w.next_check <= now]
        for w in due:
            self._run_check(w, now)
            self._retry_pending_alert(w, now)

    # --------------------------------------------------------- the machine

    def check(self, target: str, now: int) -> bool:
        """One health probe, classified OK/FAILED; deadline overrun is FAILED."""
        checker = self._checkers.get(target)
        w = self._watches.get(target)
        deadline = w.spec.deadline_ms if w else 1000
        if checker is None:
            return CHECK_FAILED
        try:
            return bool(checker(target, deadline))
        except Exception:
            return CHECK_FAILED

    def _run_check(self, w: _Watch, now: int) -> None:
        result = self.check(w.spec.target, now)
        w.next_check += w.spec.period_ms
        w.history.append((now, Status.OK if result else Status.FAILED))
        if result == CHECK_OK:
            if w.status is not Status.OK:
                w.status = Status.OK
                w.restart_failures = 0
                w.attempt_times = []
            return
        # check failed
        if w.status is Status.OK:
            w.status = Status.FAILED
            self._attempt_restart(w, now)
        elif w.status is Status.RESTARTING:
            w.restart_failures += 1
            if w.restart_failures >= self.MAX_RESTART_FAILURES:
                self._escalate(w, now)
            else:
                self._attempt_restart(w, now)
        # ESCALATED or FAILED without actuator: keep checking, no restarts

    def _attempt_restart(self, w: _Watch, now: int) -> None:
        actuator = self._actuators.get(w.spec.actuator)
        w.status = Status.RESTARTING
        w.attempt_times.append(now)
        self.restarts_attempted += 1
        if actuator is None:
            return  # unavailable actuator counts as a failed attempt
        try:
            actuator(w.spec.target)
        except Exception:
            pass  # failure shows up at the next check

    def _escalate(self, w: _Watch, now: int) -> None:
        w.status = Status.ESCALATED
        alert = Alert(target=w.spec.target,
                      reason="restart failed twice",
                      attempts=list(w.attempt_times[-2:]), at=now)
        self.alerts.append(alert)
        w.alerts_sent += 1
        self._deliver(w, alert.to_wire(), now)

    def _deliver(self, w: _Watch, alert: dict, now: int) -> None:
        notifier = self._notifiers.get(w.spec.notifier)
        if notifier is None:
            notifier = self._notifiers["log"]
        try:
            notifier(alert)
            w.pending_alert = None
        except Exception:
            # keep exactly one pending copy; retried with backoff on ticks
            w.pending_alert = alert
            w.notify_backoff_ms = max(w.notify_backoff_ms * 2, 1000)
            w.notify_next_try = now + w.notify_backoff_ms

    def _retry_pending_alert(self, w: _Watch, now: int) -> None:
        if w.pending_alert is not None and now >= w.notify_next_try:
            self._deliver(w, w.pending_alert, now)
