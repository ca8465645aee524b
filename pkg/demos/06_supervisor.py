#!/usr/bin/env python3
"""Watch, restart, escalate: the two-strikes rule.

A healthy target is killed; the first watch restarts it and nothing else
happens. Then restarts are broken and the same kill escalates after
exactly two failed attempts, producing exactly one alert.
"""
from gridmon.clock import ManualClock
from gridmon.supervisor import Supervisor, WatchSpec

clock = ManualClock(start_ms=0)
sup = Supervisor(clock)

state = {"healthy": True, "works": True, "restarts": 0}
sup.register_checker("reflector-1", lambda t, d: state["healthy"])

def restart(target):
    state["restarts"] += 1
    print(f"   t={clock.now_ms():>6} actuator: restarting {target} "
          f"({'works' if state['works'] else 'broken'})")
    if state["works"]:
        state["healthy"] = True

sup.register_actuator("sim-restart", restart)
sup.add_watch(WatchSpec("reflector-1", period_ms=2_000, deadline_ms=500))

def run(checks):
    for _ in range(checks):
        sup.tick(clock.now_ms())
        clock.advance(2_000)

print("-- kill with a working actuator: one restart, zero alerts --")
state["healthy"] = False
run(3)
print(f"   status={sup.status('reflector-1').value} "
      f"restarts={state['restarts']} alerts={len(sup.alerts)}")

print("\n-- kill with a broken actuator: two strikes, one alert --")
state.update(healthy=False, works=False)
run(6)
print(f"   status={sup.status('reflector-1').value} "
      f"restarts={state['restarts']} alerts={len(sup.alerts)}")
print(f"   alert: {sup.alerts[0].to_wire()}")

print("\n-- more failing checks never re-alert this episode --")
run(5)
print(f"   alerts still: {len(sup.alerts)}, restarts still: {state['restarts']}")

print("\n-- the target comes back by itself; the episode closes --")
state["healthy"] = True
run(1)
print(f"   status={sup.status('reflector-1').value}")
