import random

import pytest

from gridmon.clock import ManualClock
from gridmon.signing import sign
from gridmon.supervisor import (Alert, SignatureError, Status, Supervisor,
                                WatchSpec)

TRUST = "supervisor-trust"


class FakeTarget:
    def __init__(self):
        self.healthy = True
        self.restart_calls = 0
        self.restart_works = True

    def check(self, target, deadline_ms):
        return self.healthy

    def restart(self, target):
        self.restart_calls += 1
        if self.restart_works:
            self.healthy = True


def make(clock=None, trust=None, period=1_000, deadline=200):
    clock = clock or ManualClock(start_ms=50_000)
    sup = Supervisor(clock, trust_key=trust)
    target = FakeTarget()
    sup.register_checker("t1", target.check)
    sup.register_actuator("sim-restart", target.restart)
    spec = WatchSpec(target="t1", period_ms=period, deadline_ms=deadline,
                     actuator="sim-restart", notifier="log")
    signature = sign(trust, spec.signable()) if trust else None
    sup.add_watch(spec, signature)
    return sup, target, clock, spec


def run_checks(sup, clock, n, period=1_000):
    for _ in range(n):
        sup.tick(clock.now_ms())
        clock.advance(period)


class TestStateMachine:
    def test_healthy_stays_ok(self):
        sup, target, clock, _ = make()
        run_checks(sup, clock, 5)
        assert sup.status("t1") is Status.OK
        assert sup.alerts == [] and target.restart_calls == 0

    def test_kill_then_successful_restart(self):
        sup, target, clock, _ = make()
        run_checks(sup, clock, 2)
        target.healthy = False
        run_checks(sup, clock, 1)          # detect + restart (works)
        assert target.restart_calls == 1
        run_checks(sup, clock, 1)
        assert sup.status("t1") is Status.OK
        assert sup.alerts == []

    def test_restart_fails_once_then_succeeds(self):
        sup, target, clock, _ = make()
        target.healthy = False
        target.restart_works = False
        run_checks(sup, clock, 1)          # restart #1 (fails)
        target.restart_works = True
        run_checks(sup, clock, 1)          # counted failure, restart #2 (works)
        run_checks(sup, clock, 1)
        assert sup.status("t1") is Status.OK
        assert target.restart_calls == 2
        assert sup.alerts == []

    def test_two_failed_restarts_exactly_one_alert(self):
        sup, target, clock, _ = make()
        target.healthy = False
        target.restart_works = False
        run_checks(sup, clock, 6)
        assert sup.status("t1") is Status.ESCALATED
        assert target.restart_calls == 2   # no third attempt
        assert len(sup.alerts) == 1
        alert = sup.alerts[0]
        assert alert.target == "t1" and len(alert.attempts) == 2
        assert sup.alert_log().alerts[0]["attempts"] == alert.attempts

    def test_ten_more_failures_still_one_alert(self):
        sup, target, clock, _ = make()
        target.healthy = False
        target.restart_works = False
        run_checks(sup, clock, 12)
        assert len(sup.alerts) == 1
        assert target.restart_calls == 2

    def test_recovery_while_escalated_closes_episode(self):
        sup, target, clock, _ = make()
        target.healthy = False
        target.restart_works = False
        run_checks(sup, clock, 4)
        assert sup.status("t1") is Status.ESCALATED
        target.healthy = True
        run_checks(sup, clock, 1)
        assert sup.status("t1") is Status.OK
        # a fresh episode escalates again, with its own single alert
        target.healthy = False
        run_checks(sup, clock, 4)
        assert len(sup.alerts) == 2

    def test_manual_reset(self):
        sup, target, clock, _ = make()
        target.healthy = False
        target.restart_works = False
        run_checks(sup, clock, 4)
        assert sup.status("t1") is Status.ESCALATED
        sup.reset("t1")
        assert sup.status("t1") is Status.OK

    def test_missing_actuator_counts_as_failed_attempt(self):
        clock = ManualClock(start_ms=50_000)
        sup = Supervisor(clock)
        target = FakeTarget()
        target.healthy = False
        sup.register_checker("t1", target.check)
        sup.add_watch(WatchSpec("t1", 1_000, 200, actuator="missing"))
        run_checks(sup, clock, 4)
        assert sup.status("t1") is Status.ESCALATED
        assert len(sup.alerts) == 1

    def test_checker_exception_is_failed(self):
        clock = ManualClock(start_ms=50_000)
        sup = Supervisor(clock)
        sup.register_checker("t1", lambda t, d: 1 / 0)
        sup.add_watch(WatchSpec("t1", 1_000, 200))
        assert sup.check("t1", clock.now_ms()) is False

    def test_no_restart_storm_minimum_spacing(self):
        sup, target, clock, spec = make(period=1_000)
        target.healthy = False
        target.restart_works = False
        attempt_times = []
        for _ in range(6):
            before = target.restart_calls
            sup.tick(clock.now_ms())
            if target.restart_calls > before:
                attempt_times.append(clock.now_ms())
            clock.advance(1_000)
        gaps = [b - a for a, b in zip(attempt_times, attempt_times[1:])]
        assert all(g >= spec.period_ms for g in gaps)


class TestExactlyOncePerEpisode:
    @pytest.mark.parametrize("seed", [1, 2, 3, 4])
    def test_random_fault_scripts(self, seed):
        rng = random.Random(seed)
        sup, target, clock, _ = make()
        target.restart_works = False
        episodes = 0
        consecutive_failed_restarts = 0
        restarting = False
        for _ in range(300):
            flip = rng.random()
            if flip < 0.1:
                target.healthy = not target.healthy
            # shadow model of the two-strikes rule
            if target.healthy:
                restarting = False
                consecutive_failed_restarts = 0
            else:
                if restarting:
                    if consecutive_failed_restarts < 2:
                        consecutive_failed_restarts += 1
                        if consecutive_failed_restarts == 2:
                            episodes += 1
                else:
                    restarting = True
            sup.tick(clock.now_ms())
            clock.advance(1_000)
        assert len(sup.alerts) == episodes


class TestTrustGate:
    def test_unsigned_watch_rejected_and_never_actuates(self):
        clock = ManualClock(start_ms=50_000)
        sup = Supervisor(clock, trust_key=TRUST)
        target = FakeTarget()
        target.healthy = False
        sup.register_checker("t1", target.check)
        sup.register_actuator("sim-restart", target.restart)
        spec = WatchSpec("t1", 1_000, 200)
        with pytest.raises(SignatureError):
            sup.add_watch(spec, None)
        with pytest.raises(SignatureError):
            sup.add_watch(spec, sign("wrong-key", spec.signable()))
        run_checks(sup, clock, 5)
        assert target.restart_calls == 0
        assert any(a["event"] == "watch_rejected" for a in sup.audit)

    def test_signed_watch_accepted(self):
        sup, target, clock, _ = make(trust=TRUST)
        target.healthy = False
        run_checks(sup, clock, 2)
        assert target.restart_calls >= 1


class TestNotifier:
    def test_notifier_failure_retries_alert_counted_once(self):
        clock = ManualClock(start_ms=50_000)
        sup = Supervisor(clock)
        target = FakeTarget()
        target.healthy = False
        target.restart_works = False
        sup.register_checker("t1", target.check)
        sup.register_actuator("sim-restart", target.restart)
        calls = []
        fail_first = [True, True]

        def flaky(alert):
            if fail_first:
                fail_first.pop()
                raise OSError("smtp down")
            calls.append(alert)

        sup.register_notifier("flaky", flaky)
        sup.add_watch(WatchSpec("t1", 1_000, 200, notifier="flaky"))
        run_checks(sup, clock, 10)
        assert len(sup.alerts) == 1        # counted once despite retries
        assert len(calls) == 1             # delivered exactly once eventually

    def test_alert_log_file_format(self, tmp_path):
        import json

        path = str(tmp_path / "alerts.log")
        clock = ManualClock(start_ms=50_000)
        sup = Supervisor(clock)
        sup.alert_log().path = path
        target = FakeTarget()
        target.healthy = False
        target.restart_works = False
        sup.register_checker("t1", target.check)
        sup.register_actuator("sim-restart", target.restart)
        sup.add_watch(WatchSpec("t1", 1_000, 200))
        run_checks(sup, clock, 4)
        with open(path) as f:
            rows = [json.loads(line) for line in f]
        assert len(rows) == 1
        assert set(rows[0]) == {"target", "reason", "attempts", "at"}
        assert len(rows[0]["attempts"]) == 2


class TestWatchSpec:
    def test_period_must_exceed_deadline(self):
        with pytest.raises(ValueError):
            WatchSpec("t", period_ms=500, deadline_ms=500)
