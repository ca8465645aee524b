#!/usr/bin/env python3
"""Registration, discovery and lease expiry, step by step.

Starts a registry over TCP, registers a couple of services, watches the
event stream, then lets a lease lapse and sees the removal notice arrive.
"""
import time

from gridmon.clock import Clock
from gridmon.registry import (RegistryClient, RegistryCore, RegistryServer,
                              ServiceDescriptor)

clock = Clock(scale=10)  # compressed time: one scenario second per 100ms
core = RegistryCore(clock, groups={"relay", "prodfarm"}, sweep_ms=500,
                    min_lease_ms=1_000)
server = RegistryServer(core, listen="127.0.0.1:0")
server.start()
print(f"registry up at {server.endpoint}, serving groups relay + prodfarm")

client = RegistryClient([server.endpoint], clock)

print("\n-- subscribing to relay events before any service exists --")
client.subscribe_events({"relay"}, lambda e: print(
    f"   event: {e.kind} {e.descriptor.service_id}"))

print("\n-- registering two services --")
for sid, groups, attrs in (
        ("reflector-geneva", {"relay"}, {"site": "site-east"}),
        ("station-west", {"prodfarm"}, {"site": "site-west", "kind": "station"})):
    lease = client.register(ServiceDescriptor(
        service_id=sid, groups=frozenset(groups), attributes=attrs,
        endpoint="127.0.0.1:9000"), 3_000)
    print(f"   {sid}: lease {lease.duration_ms}ms, expires {lease.expires_at}")

print("\n-- lookup with attribute matching --")
for d in client.lookup({"prodfarm"}, {"site": "Cal.*"}):
    print(f"   found {d.service_id} attrs={d.attributes}")

print("\n-- re-registering with changed attributes fires AttributeChanged --")
client.register(ServiceDescriptor(
    service_id="reflector-geneva", groups=frozenset({"relay"}),
    attributes={"site": "site-east", "version": "2"},
    endpoint="127.0.0.1:9000"), 3_000)
time.sleep(0.2)

print("\n-- nobody renews; the lease lapses and ServiceRemoved arrives --")
time.sleep(clock.wall_seconds(4_500))
print(f"   lookup now: {[d.service_id for d in client.lookup({'relay'})]}")

client.close()
server.stop()
