"""Simulated targets and the in-process virtual network.

SimNode is a bounded random-walk metric source with a drawn per-collection
response time; a node can be hung (holds its worker until the deadline
reaper cancels the run) or down (fails instantly). All randomness comes
from per-node generators seeded from (scenario seed, node name), and
values are stamped with the task's scheduled due time, so a fixed seed
reproduces the metric stream byte for byte regardless of thread timing.

VirtualNetwork carries probe datagrams between agents with a configured
per-pair base RTT, jitter amplitude and loss probability. The measured
RTT equals the drawn RTT exactly (the reply's echoed timestamp is
rewritten on delivery), which keeps link statistics deterministic even
under compressed time.
"""
from __future__ import annotations

import hashlib
import random
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .clock import Clock
from .collector import CollectorModule, TaskRun
from .metrics import MetricValue
from .probe import (PACKET_LEN, ProbeAgent, ProbeConfig, Transport,
                    decode_packet, TYPE_REPLY, _PACKET, MAGIC)

STANDARD_PARAMS = ("Load1", "Load5", "Load15", "mem_used", "net_in",
                   "net_out", "cpu_user", "cpu_sys")

UP, HUNG, DOWN = "up", "hung", "down"


def param_name(i: int) -> str:
    return STANDARD_PARAMS[i] if i < len(STANDARD_PARAMS) else f"p{i:03d}"


class SimNode:
    """One simulated compute node's metric state."""

    def __init__(self, name: str, farm: str, cluster: str, seed: int,
                 params: int = 8, mean_service_ms: float = 2300.0):
        self.name = name
        self.farm = farm
        self.cluster = cluster
        self.params = params
        self.mean_service_ms = mean_service_ms
        self.rng = random.Random(f"{seed}:{name}")
        self.state = UP
        self.base = self.rng.uniform(0.2, 1.2)
        # stable per-param shape so serieses differ but stay reproducible
        self._weights = [0.5 + (i % 7) * 0.25 for i in range(params)]
        self._offsets = [(i % 11) * 0.1 for i in range(params)]
        self.collections = 0
        self._digest = hashlib.sha256(name.encode())
        self.hashed_values = 0
        self.hash_cutoff_ms: Optional[int] = None

    def step(self, due_ms: int) -> tuple[list[MetricValue], float]:
        """Advance the walk once; returns (values, drawn service time ms)."""
        service_ms = min(self.rng.lognormvariate(0.0, 0.45) * self.mean_service_ms,
                         8000.0)
        self.base = max(0.0, self.base + self.rng.gauss(0.0, 0.08))
        self.collections += 1
        values = []
        for i in range(self.params):
            v = self.base * self._weights[i] + self._offsets[i]
            values.append(MetricValue(self.farm, self.cluster, self.name,
                                      param_name(i), due_ms, v))
            if self.hash_cutoff_ms is None or due_ms <= self.hash_cutoff_ms:
                self._digest.update(struct.pack("<qId", due_ms, i, v))
                self.hashed_values += 1
        return values, service_ms

    def stream_digest(self) -> str:
        return self._digest.hexdigest()


class NodeTable:
    """All simulated nodes of a scenario, addressable by name."""

    def __init__(self):
        self._lock = threading.Lock()
        self.nodes: dict[str, SimNode] = {}

    def add(self, node: SimNode) -> SimNode:
        with self._lock:
            self.nodes[node.name] = node
        return node

    def get(self, name: str) -> Optional[SimNode]:
        with self._lock:
            return self.nodes.get(name)

    def set_state(self, name: str, state: str) -> bool:
        node = self.get(name)
        if node is None:
            return False
        node.state = state
        return True

    def stream_hash(self) -> tuple[str, int]:
        """Combined digest over all nodes, order-independent across nodes."""
        with self._lock:
            nodes = sorted(self.nodes.values(), key=lambda n: n.name)
        h = hashlib.sha256()
        total = 0
        for node in nodes:
            h.update(node.stream_digest().encode())
            total += node.hashed_values
        return h.hexdigest(), total


class SimCollectModule(CollectorModule):
    """Collector plugin that polls SimNodes.

    A healthy node answers after its drawn service time; a hung node holds
    the worker until the engine cancels the run; a down node fails fast
    like a refused connection.
    """

    name = "sim_load"

    def __init__(self, table: NodeTable):
        self.table = table

    def collect(self, run: TaskRun) -> list[MetricValue]:
        node = self.table.get(run.target)
        if node is None:
            raise RuntimeError(f"no such node {run.target}")
        if node.state == DOWN:
            raise ConnectionError(f"{run.target} is down")
        if node.state == HUNG:
            # wait for the hard cancel; late result is discarded anyway
            run.cancel.wait(run.clock.wall_seconds(run.deadline_ms * 2) or 1.0)
            return []
        values, service_ms = node.step(run.due_ms)
        if service_ms > 0:
            cancelled = run.cancel.wait(run.clock.wall_seconds(service_ms))
            if cancelled:
                return []
        return values

    def healthcheck(self, target: str, deadline_ms: int) -> bool:
        node = self.table.get(target)
        return node is not None and node.state == UP


class SimNetModule(SimCollectModule):
    """Same walk, network-ish counters; separate module name for toggling."""

    name = "sim_net"

    def collect(self, run: TaskRun) -> list[MetricValue]:
        values = super().collect(run)
        return [MetricValue(v.farm, v.cluster, v.node, "net_" + v.param, v.time,
                            abs(v.value) * 1000.0)
                for v in values]


@dataclass
class LinkParams:
    base_rtt_ms: float = 50.0
    jitter_ms: float = 0.0
    loss: float = 0.0


class VirtualTransport(Transport):
    def __init__(self, node_id: str, net: "VirtualNetwork"):
        self.node_id = node_id
        self.net = net
        self.receiver: Optional[Callable[[bytes, object], None]] = None

    def send(self, addr, data: bytes) -> None:
        self.net.send(self.node_id, str(addr), data)

    def set_receiver(self, cb: Callable[[bytes, object], None]) -> None:
        self.receiver = cb

    def close(self) -> None:
        self.net.detach(self.node_id)


class VirtualNetwork:
    """Delivers probe datagrams between attached agents.

    Loss and RTT are drawn per request from a per-directed-link generator
    seeded by (seed, src, dst); the draw order matches the sender's probe
    sequence, so the statistics every agent measures are reproducible.
    """

    def __init__(self, clock: Clock, seed: int = 0):
        self.clock = clock
        self.seed = seed
        self._lock = threading.RLock()
        self._links: dict[tuple[str, str], LinkParams] = {}
        self._default = LinkParams()
        self._transports: dict[str, VirtualTransport] = {}
        self._up: dict[str, bool] = {}
        self._rngs: dict[tuple[str, str], random.Random] = {}
        self._inflight: dict[tuple[str, str, int], float] = {}
        self.delivered = 0
        self.dropped = 0

    def transport(self, node_id: str) -> VirtualTransport:
        t = VirtualTransport(node_id, self)
        with self._lock:
            self._transports[node_id] = t
            self._up.setdefault(node_id, True)
        return t

    def detach(self, node_id: str) -> None:
        with self._lock:
            self._transports.pop(node_id, None)

    def set_up(self, node_id: str, up: bool) -> None:
        with self._lock:
            self._up[node_id] = up

    def set_link(self, a: str, b: str, base_rtt_ms: Optional[float] = None,
                 jitter_ms: Optional[float] = None,
                 loss: Optional[float] = None) -> None:
        pair = (a, b) if a < b else (b, a)
        with self._lock:
            params = self._links.get(pair)
            if params is None:
                params = LinkParams(self._default.base_rtt_ms,
                                    self._default.jitter_ms, self._default.loss)
                self._links[pair] = params
            if base_rtt_ms is not None:
                params.base_rtt_ms = base_rtt_ms
            if jitter_ms is not None:
                params.jitter_ms = jitter_ms
            if loss is not None:
                params.loss = loss

    def link(self, a: str, b: str) -> LinkParams:
        pair = (a, b) if a < b else (b, a)
        with self._lock:
            return self._links.get(pair, self._default)

    def _rng(self, src: str, dst: str) -> random.Random:
        key = (src, dst)
        rng = self._rngs.get(key)
        if rng is None:
            rng = self._rngs[key] = random.Random(f"{self.seed}:{src}:{dst}")
        return rng

    def send(self, src: str, dst: str, data: bytes) -> None:
        with self._lock:
            if not self._up.get(src, False) or not self._up.get(dst, False):
                self.dropped += 1
                return
            target = self._transports.get(dst)
        if target is None or target.receiver is None:
            self.dropped += 1
            return
        try:
            pkt = decode_packet(data)
        except ValueError:
            target.receiver(data, src)
            return
        if pkt.ptype == TYPE_REPLY:
            key = (dst, src, pkt.seq)  # requester, responder, seq
            with self._lock:
                rtt = self._inflight.pop(key, None)
            if rtt is None:
                self.dropped += 1
                return
            # rewrite the echoed send time so measured RTT == drawn RTT
            t_send = max(self.clock.monotonic_ns() - int(rtt * 1e6), 0)
            data = _PACKET.pack(MAGIC, pkt.ptype, pkt.seq, t_send, pkt.sender_id)
            self.delivered += 1
            target.receiver(data, src)
            return
        # request: draw drop + RTT once per round trip
        params = self.link(src, dst)
        rng = self._rng(src, dst)
        drop = rng.random() < params.loss
        rtt = params.base_rtt_ms + (rng.uniform(-params.jitter_ms, params.jitter_ms)
                                    if params.jitter_ms > 0 else 0.0)
        rtt = max(params.base_rtt_ms / 2, rtt)
        if drop:
            self.dropped += 1
            return
        with self._lock:
            self._inflight[(src, dst, pkt.seq)] = rtt
            if len(self._inflight) > 100_000:
                self._inflight.clear()
        self.delivered += 1
        target.receiver(data, src)


class SimReflector:
    """A reflector: probe agent on the virtual net plus a health surface."""

    def __init__(self, reflector_id: str, net: VirtualNetwork, clock: Clock,
                 config: Optional[ProbeConfig] = None,
                 emit: Optional[Callable[[list[MetricValue]], None]] = None):
        self.reflector_id = reflector_id
        self.net = net
        self.healthy = True
        self.restart_works = True
        self.restart_count = 0
        self.agent = ProbeAgent(reflector_id, net.transport(reflector_id),
                                clock, config=config, emit=emit,
                                farm=reflector_id)

    def set_peers(self, peer_ids: list[str]) -> None:
        self.agent.set_peers({p: p for p in peer_ids})

    def start(self) -> None:
        self.agent.start()

    def stop(self) -> None:
        self.agent.stop()

    def kill(self) -> None:
        self.healthy = False
        self.net.set_up(self.reflector_id, False)

    def restore(self) -> None:
        self.healthy = True
        self.net.set_up(self.reflector_id, True)

    def health_check(self, target: str, deadline_ms: int) -> bool:
        return self.healthy

    def restart(self) -> None:
        """Actuator hook; honors a scripted broken-restart flag."""
        self.restart_count += 1
        if self.restart_works:
            self.restore()
