"""Deterministic desk-scale scenarios.

A scenario spins up real services in one process: registries, stations
polling simulated farms, a reflector mesh probing over the virtual
network, a supervisor, and the repository with its HTTP API. Everything
runs against one scaled clock; periods, deadlines and windows keep their
ratios at any time scale.

A fixed seed fixes the entire schedule: simulated metric values are
stamped with their task's due time and hashed as they are produced, so
two runs with the same seed produce the same stream hash and the same
schedule-determined counters. Latency percentiles and worker counts are
measurements and are reported, not reproduced.
"""
from __future__ import annotations

import json
import logging
import statistics
import threading
from dataclasses import dataclass, field
from typing import Optional

from .clock import Clock
from .metrics import MetricValue
from .overlay import MstConfig
from .probe import ProbeConfig
from .registry import RegistryClient, RegistryCore, RegistryServer, ServiceDescriptor
from .repository import RepoConfig, Repository
from .signing import sign
from .simnet import (LinkParams, NodeTable, SimCollectModule, SimNetModule,
                     SimNode, SimReflector, VirtualNetwork, DOWN, HUNG, UP)
from .station import ScheduleEntry, StationConfig, StationServer
from .subscription import FilterSpec, Predicate
from .supervisor import Supervisor, WatchSpec

log = logging.getLogger(__name__)

FIXED_EPOCH_MS = 1_700_000_000_000


def _stagger(name: str, period_ms: int) -> int:
    """Stable per-task offset within one period."""
    import hashlib

    digest = hashlib.md5(name.encode()).digest()
    return int.from_bytes(digest[:8], "big") % max(period_ms, 1)


@dataclass
class FarmSpec:
    name: str
    nodes: int = 10
    params_per_node: int = 8
    period_ms: int = 60_000
    deadline_ms: int = 10_000
    mean_service_ms: float = 2_300.0
    cluster: str = "compute"


@dataclass
class LinkSpec:
    a: str
    b: str
    rtt_ms: float = 50.0
    jitter_ms: float = 0.0
    loss: float = 0.0


@dataclass
class ReflectorSpec:
    ids: list[str] = field(default_factory=list)
    group: str = "relay"
    probe_period_ms: int = 2_000
    loss_window: int = 50
    reply_timeout_ms: int = 1_000
    recompute_ms: int = 10_000
    momentum: float = 0.8
    default_rtt_ms: float = 50.0
    default_jitter_ms: float = 0.0
    default_loss: float = 0.0
    links: list[LinkSpec] = field(default_factory=list)
    lease_ms: int = 10_000
    watch_period_ms: int = 4_000
    watch_deadline_ms: int = 1_000


@dataclass
class FaultEvent:
    at_ms: int
    action: str
    target: str = ""
    a: str = ""
    b: str = ""
    rtt_ms: Optional[float] = None
    jitter_ms: Optional[float] = None
    loss: Optional[float] = None


@dataclass
class ScenarioConfig:
    seed: int = 42
    duration_ms: int = 60_000
    time_scale: float = 1.0
    epoch0_ms: int = FIXED_EPOCH_MS
    group: str = "sim"
    trust_key: str = "dev-trust-key"
    admin_token: str = "admin-dev"
    farms: list[FarmSpec] = field(default_factory=list)
    reflectors: Optional[ReflectorSpec] = None
    faults: list[FaultEvent] = field(default_factory=list)
    registry_count: int = 1
    sweep_ms: int = 1_000
    station_lease_ms: int = 10_000
    replicate_ms: int = 5_000
    max_workers: int = 64
    repo_predicates: list[Predicate] = field(default_factory=list)
    repo_filters: list[FilterSpec] = field(default_factory=list)
    store_path: Optional[str] = None
    alert_log_path: Optional[str] = None
    report_path: Optional[str] = None
    hash_guard_ms: Optional[int] = None

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        sc = d.get("scenario", {})
        cfg = cls(
            seed=int(sc.get("seed", 42)),
            duration_ms=int(sc.get("duration_ms", 60_000)),
            time_scale=float(sc.get("time_scale", 1.0)),
            epoch0_ms=int(sc.get("epoch0_ms", FIXED_EPOCH_MS)),
            group=str(sc.get("group", "sim")),
            trust_key=str(sc.get("trust_key", "dev-trust-key")),
            admin_token=str(sc.get("admin_token", "admin-dev")),
        )
        for f in d.get("farms", []):
            cfg.farms.append(FarmSpec(
                name=str(f["name"]), nodes=int(f.get("nodes", 10)),
                params_per_node=int(f.get("params_per_node", 8)),
                period_ms=int(f.get("period_ms", 60_000)),
                deadline_ms=int(f.get("deadline_ms", 10_000)),
                mean_service_ms=float(f.get("mean_service_ms", 2_300.0)),
                cluster=str(f.get("cluster", "compute"))))
        r = d.get("reflectors")
        if r and r.get("ids"):
            spec = ReflectorSpec(
                ids=[str(x) for x in r["ids"]],
                group=str(r.get("group", "relay")),
                probe_period_ms=int(r.get("probe_period_ms", 2_000)),
                loss_window=int(r.get("loss_window", 50)),
                reply_timeout_ms=int(r.get("reply_timeout_ms", 1_000)),
                recompute_ms=int(r.get("recompute_ms", 10_000)),
                momentum=float(r.get("momentum", 0.8)),
                default_rtt_ms=float(r.get("default_rtt_ms", 50.0)),
                default_jitter_ms=float(r.get("default_jitter_ms", 0.0)),
                default_loss=float(r.get("default_loss", 0.0)),
                lease_ms=int(r.get("lease_ms", 10_000)),
                watch_period_ms=int(r.get("watch_period_ms", 4_000)),
                watch_deadline_ms=int(r.get("watch_deadline_ms", 1_000)))
            for l in r.get("links", []):
                spec.links.append(LinkSpec(
                    a=str(l["a"]), b=str(l["b"]),
                    rtt_ms=float(l.get("rtt_ms", spec.default_rtt_ms)),
                    jitter_ms=float(l.get("jitter_ms", spec.default_jitter_ms)),
                    loss=float(l.get("loss", spec.default_loss))))
            cfg.reflectors = spec
        for ev in d.get("faults", []):
            cfg.faults.append(FaultEvent(
                at_ms=int(ev["at_ms"]), action=str(ev["action"]),
                target=str(ev.get("target", "")),
                a=str(ev.get("a", "")), b=str(ev.get("b", "")),
                rtt_ms=ev.get("rtt_ms"), jitter_ms=ev.get("jitter_ms"),
                loss=ev.get("loss")))
        reg = d.get("registry", {})
        cfg.registry_count = int(reg.get("count", 1))
        cfg.sweep_ms = int(reg.get("sweep_ms", 1_000))
        cfg.station_lease_ms = int(reg.get("lease_ms", 10_000))
        cfg.replicate_ms = int(reg.get("replicate_ms", 5_000))
        col = d.get("collector", {})
        cfg.max_workers = int(col.get("max_workers", 64))
        repo = d.get("repository", {})
        for p in repo.get("predicates", []):
            cfg.repo_predicates.append(Predicate.from_wire(p))
        for fd in repo.get("filters", []):
            cfg.repo_filters.append(FilterSpec.from_wire(fd))
        out = d.get("output", {})
        cfg.store_path = out.get("store_path")
        cfg.alert_log_path = out.get("alert_log_path")
        cfg.report_path = out.get("report_path")
        if "hash_guard_ms" in sc:
            cfg.hash_guard_ms = int(sc["hash_guard_ms"])
        return cfg

    @classmethod
    def load(cls, path: str) -> "ScenarioConfig":
        if path.endswith(".json"):
            with open(path, encoding="utf-8") as f:
                return cls.from_dict(json.load(f))
        import tomli

        with open(path, "rb") as f:
            return cls.from_dict(tomli.load(f))


class Scenario:
    """A running scenario; owns every service and the fault schedule."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.clock = Clock(scale=config.time_scale, epoch0_ms=config.epoch0_ms)
        self.t0 = 0
        self.nodes = NodeTable()
        self.registries: list[RegistryServer] = []
        self.stations: list[StationServer] = []
        self.net: Optional[VirtualNetwork] = None
        self.reflectors: dict[str, SimReflector] = {}
        self._reflector_clients: dict[str, RegistryClient] = {}
        self.supervisor: Optional[Supervisor] = None
        self.repo: Optional[Repository] = None
        self._fault_thread: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self.started = False

    # ------------------------------------------------------------ assembly

    def start(self) -> None:
        cfg = self.config
        # scenario time zero is the fixed epoch, not "now": first-due times,
        # value stamps and the hash window are then identical across runs
        self.t0 = cfg.epoch0_ms
        guard = cfg.hash_guard_ms
        if guard is None:
            max_deadline = max((f.deadline_ms for f in cfg.farms), default=0)
            guard = max_deadline + 5_000
        hash_cutoff = self.t0 + cfg.duration_ms - guard

        # registries first; they bind at construction, so endpoints are
        # known before anything registers, and peers can point at each other
        groups = {cfg.group}
        if cfg.reflectors:
            groups.add(cfg.reflectors.group)
        for _ in range(max(cfg.registry_count, 1)):
            core = RegistryCore(self.clock, groups=set(groups),
                                sweep_ms=cfg.sweep_ms)
            self.registries.append(RegistryServer(core, listen="127.0.0.1:0",
                                                  replicate_ms=cfg.replicate_ms))
        for i, server in enumerate(self.registries):
            server.peers = [s.endpoint for j, s in enumerate(self.registries)
                            if j != i]
        for server in self.registries:
            server.start()
        endpoints = [s.endpoint for s in self.registries]

        # farms and their stations; first-dues are staggered across one
        # period by a stable hash so dispatch load is spread like a real
        # site's would be, identically on every run
        for farm in cfg.farms:
            node_names = [f"{farm.name}-n{i:03d}" for i in range(farm.nodes)]
            for name in node_names:
                node = SimNode(name, farm=farm.name, cluster=farm.cluster,
                               seed=cfg.seed, params=farm.params_per_node,
                               mean_service_ms=farm.mean_service_ms)
                node.hash_cutoff_ms = hash_cutoff
                self.nodes.add(node)
            schedule = [ScheduleEntry(
                module="sim_load", targets=[name],
                period_ms=farm.period_ms, deadline_ms=farm.deadline_ms,
                first_due=self.t0 + 200 + _stagger(name, farm.period_ms))
                for name in node_names]
            station = StationServer(StationConfig(
                station_id=f"station-{farm.name}",
                farm=farm.name, groups={cfg.group},
                registries=list(endpoints), trust_key=cfg.trust_key,
                token=None, lease_ms=cfg.station_lease_ms,
                max_workers=cfg.max_workers,
                default_deadline_ms=farm.deadline_ms,
                schedule=schedule),
                self.clock)
            station.register_module(SimCollectModule(self.nodes))
            station.register_module(SimNetModule(self.nodes))
            station.restart_handler = lambda target: self.nodes.set_state(target, UP)
            self.stations.append(station)
        for station in self.stations:
            station.apply_schedule()
            station.start()

        # reflector mesh
        if cfg.reflectors:
            self._start_reflectors(cfg.reflectors, endpoints)

        # repository
        predicates = cfg.repo_predicates or [Predicate()]
        self.repo = Repository(RepoConfig(
            registries=list(endpoints), groups=set(groups),
            predicates=predicates,
            filters=[(spec, sign(cfg.trust_key, spec.signable()))
                     for spec in cfg.repo_filters],
            admin_tokens={cfg.admin_token}, trust_key=cfg.trust_key,
            mst=MstConfig(momentum=cfg.reflectors.momentum,
                          recompute_period_ms=cfg.reflectors.recompute_ms)
            if cfg.reflectors else MstConfig(),
            mst_group=cfg.reflectors.group if cfg.reflectors else None,
            probe=self._probe_config() if cfg.reflectors else ProbeConfig(),
            alert_log_path=cfg.alert_log_path), self.clock)
        self.repo.start()

        # fault schedule
        if cfg.faults:
            self._fault_thread = threading.Thread(target=self._fault_loop,
                                                  name="fault-script", daemon=True)
            self._fault_thread.start()
        self.started = True

    def _probe_config(self) -> ProbeConfig:
        r = self.config.reflectors
        return ProbeConfig(period_ms=r.probe_period_ms, window=r.loss_window,
                           reply_timeout_ms=r.reply_timeout_ms)

    def _start_reflectors(self, spec: ReflectorSpec, endpoints: list[str]) -> None:
        self.net = VirtualNetwork(self.clock, seed=self.config.seed)
        self.net._default = LinkParams(spec.default_rtt_ms, spec.default_jitter_ms,
                                       spec.default_loss)
        for link in spec.links:
            self.net.set_link(link.a, link.b, link.rtt_ms, link.jitter_ms,
                              link.loss)
        probe_cfg = self._probe_config()
        for rid in spec.ids:
            reflector = SimReflector(rid, self.net, self.clock, config=probe_cfg,
                                     emit=self._reflector_emit)
            reflector.set_peers([p for p in spec.ids if p != rid])
            self.reflectors[rid] = reflector
        for rid, reflector in self.reflectors.items():
            reflector.start()
            self._register_reflector(rid, endpoints, spec)

        # the supervisor watches every reflector with a signed spec
        self.supervisor = Supervisor(self.clock, trust_key=self.config.trust_key)
        self.supervisor.register_actuator("sim-restart", self._restart_reflector)
        self.supervisor.register_notifier("repo", self._notify_alert)
        if self.config.alert_log_path:
            self.supervisor.alert_log().path = self.config.alert_log_path
        for rid, reflector in self.reflectors.items():
            self.supervisor.register_checker(rid, reflector.health_check)
            watch = WatchSpec(target=rid, period_ms=spec.watch_period_ms,
                              deadline_ms=spec.watch_deadline_ms,
                              actuator="sim-restart", notifier="repo")
            self.supervisor.add_watch(
                watch, sign(self.config.trust_key, watch.signable()))
        self.supervisor.start()

    def _register_reflector(self, rid: str, endpoints: list[str],
                            spec: ReflectorSpec) -> None:
        client = RegistryClient(list(endpoints), self.clock)
        descriptor = ServiceDescriptor(
            service_id=rid, groups=frozenset({spec.group}),
            attributes={"kind": "reflector"}, endpoint="127.0.0.1:0")
        try:
            client.start_renewing(descriptor, spec.lease_ms)
        except OSError as e:
            log.warning("reflector %s registration failed: %s", rid, e)
        self._reflector_clients[rid] = client

    def _reflector_emit(self, values: list[MetricValue]) -> None:
        if self.repo:
            self.repo.ingest(values, source="probe")

    def _restart_reflector(self, target: str) -> None:
        reflector = self.reflectors.get(target)
        if reflector is None:
            raise RuntimeError(f"no reflector {target}")
        reflector.restart()
        client = self._reflector_clients.get(target)
        if reflector.healthy and (client is None or not client.is_renewing):
            self._reregister(target)

    def _reregister(self, rid: str) -> None:
        old = self._reflector_clients.get(rid)
        if old:
            old.close()
        spec = self.config.reflectors
        endpoints = [s.endpoint for s in self.registries]
        self._register_reflector(rid, endpoints, spec)

    def _notify_alert(self, alert: dict) -> None:
        self.supervisor.alert_log()(alert)
        if self.repo:
            self.repo.record_alert(alert)

    # -------------------------------------------------------------- faults

    def _fault_loop(self) -> None:
        for event in sorted(self.config.faults, key=lambda e: e.at_ms):
            while not self._stop.is_set():
                wait = self.t0 + event.at_ms - self.clock.now_ms()
                if wait <= 0:
                    break
                self.clock.sleep(min(wait, 200))
            if self._stop.is_set():
                return
            self.inject_fault(event)

    def inject_fault(self, event: FaultEvent) -> None:
        action = event.action
        log.info("fault at %dms: %s %s", event.at_ms, action,
                 event.target or f"{event.a}-{event.b}")
        if action == "kill_node":
            if not self.nodes.set_state(event.target, DOWN):
                log.warning("fault: unknown node %s", event.target)
        elif action == "hang_node":
            if not self.nodes.set_state(event.target, HUNG):
                log.warning("fault: unknown node %s", event.target)
        elif action == "restore_node":
            if not self.nodes.set_state(event.target, UP):
                log.warning("fault: unknown node %s", event.target)
        elif action == "kill_reflector":
            reflector = self.reflectors.get(event.target)
            if reflector is None:
                log.warning("fault: unknown reflector %s", event.target)
                return
            reflector.kill()
            client = self._reflector_clients.get(event.target)
            if client:
                client.stop_renewing()
        elif action == "restore_reflector":
            reflector = self.reflectors.get(event.target)
            if reflector:
                reflector.restore()
                self._reregister(event.target)
            else:
                log.warning("fault: unknown reflector %s", event.target)
        elif action == "break_restarts":
            reflector = self.reflectors.get(event.target)
            if reflector:
                reflector.restart_works = False
        elif action == "fix_restarts":
            reflector = self.reflectors.get(event.target)
            if reflector:
                reflector.restart_works = True
        elif action == "set_link":
            if self.net:
                self.net.set_link(event.a, event.b, event.rtt_ms,
                                  event.jitter_ms, event.loss)
        else:
            log.warning("fault: unknown action %s", action)

    # -------------------------------------------------------------- report

    def run(self) -> dict:
        self.start()
        try:
            end = self.t0 + self.config.duration_ms
            while not self._stop.is_set() and self.clock.now_ms() < end:
                self.clock.sleep(min(end - self.clock.now_ms(), 250))
            return self.report()
        finally:
            self.stop()

    def report(self) -> dict:
        cfg = self.config
        elapsed_ms = self.clock.now_ms() - self.t0
        stream_hash, hashed_values = self.nodes.stream_hash()
        accepted = sum(s.ingested for s in self.stations)
        latencies = sorted(sum((s.engine.latencies_ms for s in self.stations), []))
        report = {
            "seed": cfg.seed,
            "duration_ms": elapsed_ms,
            "time_scale": cfg.time_scale,
            "ingest": {
                "station_values_accepted": accepted,
                "rate_per_s": accepted / (elapsed_ms / 1000.0) if elapsed_ms else 0.0,
            },
            "engine": {
                "dispatched": sum(s.engine.dispatched for s in self.stations),
                "completed": sum(s.engine.completed for s in self.stations),
                "failed": sum(s.engine.failed for s in self.stations),
                "saturation": sum(s.engine.saturation_count for s in self.stations),
                "dropped_results": sum(s.engine.dropped_results for s in self.stations),
                "mean_active_workers": (
                    sum(s.engine.mean_active_workers() for s in self.stations)
                    / max(len(self.stations), 1)),
                "latency_ms": _percentiles(latencies),
            },
            "stream": {
                "hash": stream_hash,
                "values_hashed": hashed_values,
            },
            "repo": {
                "ingested": self.repo.ingested if self.repo else 0,
                "upstreams": self.repo.upstream_count() if self.repo else 0,
                "dropped_subscriptions":
                    self.repo.hub.dropped_subscriptions if self.repo else 0,
            },
            "mst": {
                "updates": len(self.repo.tree_updates) if self.repo else 0,
                "epoch": (self.repo.optimizer.tree.epoch
                          if self.repo and self.repo.optimizer.tree else 0),
                "edges": sorted(list(e) for e in
                                (self.repo.optimizer.tree.edges
                                 if self.repo and self.repo.optimizer.tree
                                 else frozenset())),
                "total_weight": (self.repo.optimizer.tree.total_weight
                                 if self.repo and self.repo.optimizer.tree else 0.0),
            },
            "supervisor": {
                "restarts": self.supervisor.restarts_attempted if self.supervisor else 0,
                "alerts": len(self.supervisor.alerts) if self.supervisor else 0,
            },
        }
        if cfg.report_path:
            with open(cfg.report_path, "w", encoding="utf-8") as f:
                json.dump(report, f, indent=2)
        return report

    def stop(self) -> None:
        self._stop.set()
        if self.supervisor:
            self.supervisor.stop()
        for client in self._reflector_clients.values():
            client.close()
        for reflector in self.reflectors.values():
            reflector.stop()
        if self.repo:
            self.repo.stop()
        for station in self.stations:
            station.stop()
        for server in self.registries:
            server.stop()


def _percentiles(sorted_ms: list[float]) -> dict:
    if not sorted_ms:
        return {"p50": None, "p90": None, "p99": None, "count": 0}

    def pct(p: float) -> float:
        idx = min(int(p * len(sorted_ms)), len(sorted_ms) - 1)
        return sorted_ms[idx]

    return {"p50": statistics.median(sorted_ms), "p90": pct(0.90),
            "p99": pct(0.99), "count": len(sorted_ms)}


def run_scenario(config: ScenarioConfig) -> dict:
    return Scenario(config).run()
