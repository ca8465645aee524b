#!/usr/bin/env python3
"""Predicate subscriptions and signed filter agents on a live flow.

One subscriber selects load metrics by regex; a stalled subscriber
overflows and is disconnected without slowing anyone; a signed SUM filter
aggregates farm traffic each period, and a tampered one is refused.
"""
import threading
import time

from gridmon.clock import Clock
from gridmon.metrics import MetricValue
from gridmon.signing import sign
from gridmon.subscription import (FilterEngine, FilterSpec, Predicate,
                                  SignatureError, SubscriptionHub)

TRUST = "demo-trust-key"
clock = Clock()
hub = SubscriptionHub()

loads = []
hub.subscribe(Predicate(param_re="Load.*", vmin=0.5), loads.extend)

stall = threading.Event()
dropped = []
hub.subscribe(Predicate(), lambda batch: stall.wait(30), hwm=100,
              on_drop=lambda sid, why: dropped.append(why))

emitted = []
filters = FilterEngine(trust_key=TRUST, local_farm="demo", clock=clock,
                       emit=lambda v: emitted.append(v))
spec = FilterSpec("farm-traffic", Predicate(param_re="net_out"), "SUM",
                  period_ms=1_000, output_param="total_net_out")
filters.deploy(spec, sign(TRUST, spec.signable()))

tampered = FilterSpec("farm-traffic", Predicate(param_re="net_out"), "SUM",
                      period_ms=1_000, output_param="exfiltrate")
try:
    filters.deploy(tampered, sign(TRUST, spec.signable()))
except SignatureError as e:
    print(f"tampered filter refused: {e}")

print("\n-- publishing three rounds of metrics from five nodes --")
for round_no in range(3):
    batch = []
    for n in range(5):
        t = clock.now_ms() + round_no
        batch.append(MetricValue("demo", "compute", f"n{n}", "Load5", t,
                                 0.2 + 0.3 * n))
        batch.append(MetricValue("demo", "compute", f"n{n}", "net_out", t,
                                 100.0 * (n + 1)))
    hub.publish(batch)
    filters.observe(batch)
    out = filters.tick("farm-traffic", clock.now_ms())
    print(f"   round {round_no}: filter emitted {out.param}={out.value:.0f} "
          f"on {out.farm}/{out.cluster}/{out.node}")

time.sleep(0.2)
print(f"\nload subscriber got {len(loads)} values "
      f"(only Load* with value >= 0.5): "
      f"{sorted({v.value for v in loads})}")
print(f"stalled subscriber dropped: {dropped or 'not yet (queue not full)'}")
stall.set()
