"""The per-site station service.

Hosts the collection engine, the local time-series store, the
subscription hub and the filter engine behind one control endpoint, and
keeps itself registered (lease renewed) with the configured registries.

Clients connect and speak SUBSCRIBE / HISTORY / FILTER_DEPLOY /
UNSUBSCRIBE; delivery of matching live values arrives as DATA frames on
the same connection, written by that client's own lane. ADMIN frames
(module toggles, filter deploys, target restarts) arrive the same way,
normally relayed through the repository.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .clock import Clock
from .collector import CollectionEngine, CollectorModule
from .metrics import MetricValue
from .registry import RegistryClient, ServiceDescriptor
from .store import BadWidth, RetentionPolicy, StoreError, TimeSeriesStore
from .subscription import (FilterEngine, FilterSpec, Predicate, PredicateError,
                           SignatureError, SubscriptionHub, history)
from .wire import Connection, FrameServer, error_frame

log = logging.getLogger(__name__)


@dataclass
class ScheduleEntry:
    module: str
    targets: list[str]
    period_ms: int
    deadline_ms: Optional[int] = None
    first_due: Optional[int] = None


@dataclass
class StationConfig:
    station_id: str
    farm: str
    groups: set[str]
    listen: str = "127.0.0.1:0"
    registries: list[str] = field(default_factory=list)
    store_path: Optional[str] = None
    trust_key: str = "dev-trust-key"
    token: Optional[str] = None
    lease_ms: int = 30_000
    max_workers: int = 64
    default_deadline_ms: int = 10_000
    compact_ms: int = 60_000
    flush_ms: int = 1_000
    schedule: list[ScheduleEntry] = field(default_factory=list)
    retention: Optional[RetentionPolicy] = None
    attributes: dict[str, str] = field(default_factory=dict)


class StationServer:
    def __init__(self, config: StationConfig, clock: Clock):
        self.config = config
        self.clock = clock
        self.store = TimeSeriesStore(path=config.store_path,
                                     policy=config.retention)
        self.hub = SubscriptionHub()
        self.filters = FilterEngine(trust_key=config.trust_key,
                                    local_farm=config.farm, clock=clock,
                                    emit=self._emit_filter_value)
        self.engine = CollectionEngine(clock=clock, sink=self._on_values,
                                       max_workers=config.max_workers,
                                       default_deadline_ms=config.default_deadline_ms)
        self.server = FrameServer(config.listen, self._handle)
        self.registry: Optional[RegistryClient] = None
        self.restart_handler: Optional[Callable[[str], bool]] = None
        self.ingested = 0
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    # ------------------------------------------------------------- wiring

    @property
    def endpoint(self) -> str:
        return self.server.endpoint

    def descriptor(self) -> ServiceDescriptor:
        attrs = {"kind": "station", "farm": self.config.farm}
        attrs.update(self.config.attributes)
        return ServiceDescriptor(service_id=self.config.station_id,
                                 groups=frozenset(self.config.groups),
                                 attributes=attrs, endpoint=self.endpoint)

    def register_module(self, module: CollectorModule) -> None:
        self.engine.register_module(module)

    def apply_schedule(self) -> list[str]:
        ids = []
        for entry in self.config.schedule:
            for target in entry.targets:
                ids.append(self.engine.schedule(
                    entry.module, target, entry.period_ms, entry.deadline_ms,
                    task_id=f"{entry.module}:{target}",
                    first_due=entry.first_due))
        return ids

    def start(self) -> None:
        self.server.start()
        self.engine.start()
        t = threading.Thread(target=self._housekeeping_loop,
                             name="station-housekeeping", daemon=True)
        t.start()
        self._threads.append(t)
        if self.config.registries:
            self.registry = RegistryClient(self.config.registries, self.clock,
                                           token=self.config.token)
            try:
                self.registry.start_renewing(self.descriptor(), self.config.lease_ms)
            except OSError as e:
                log.warning("initial registration failed: %s", e)

    def stop(self) -> None:
        self._stop.set()
        if self.registry:
            self.registry.close()
        self.engine.stop()
        self.server.stop()
        for t in self._threads:
            t.join(timeout=2)
        self.store.close()

    def _housekeeping_loop(self) -> None:
        last_compact = self.clock.now_ms()
        while not self._stop.is_set():
            self.clock.sleep(min(self.config.flush_ms, 500))
            now = self.clock.now_ms()
            self.filters.tick_due(now)
            self.store.flush()
            if now - last_compact >= self.config.compact_ms:
                self.store.compact(now)
                last_compact = now

    # --------------------------------------------------------- data paths

    def _on_values(self, task_id: str, values: list[MetricValue]) -> None:
        self.ingested += self.store.insert(values)
        self.hub.publish(values)
        self.filters.observe(values)

    def publish(self, values: list[MetricValue]) -> None:
        """Entry point for in-process producers (probe agents, simulators)."""
        self._on_values("_local", values)

    def _emit_filter_value(self, value: MetricValue) -> None:
        self.ingested += self.store.insert([value])
        self.hub.publish([value])

    # ----------------------------------------------------------- protocol

    def _check_token(self, frame: dict) -> bool:
        return self.config.token is None or frame.get("token") == self.config.token

    def _handle(self, conn: Connection) -> None:
        subs: list[int] = []
        try:
            while True:
                frame = conn.recv()
                if frame is None:
                    return
                if not frame:
                    continue
                self._dispatch(conn, frame, subs)
        finally:
            for sub_id in subs:
                self.hub.unsubscribe(sub_id)

    def _dispatch(self, conn: Connection, frame: dict, subs: list[int]) -> None:
        ftype = frame.get("type")
        try:
            if ftype == "SUBSCRIBE":
                predicate = Predicate.from_wire(frame.get("predicate") or {})

                def send(batch: list[MetricValue]) -> None:
                    conn.send({"type": "DATA",
                               "values": [v.to_wire() for v in batch]})

                sub_id = self.hub.subscribe(predicate, send)
                subs.append(sub_id)
                conn.send({"type": "SUBSCRIBE_ACK", "sub_id": sub_id})
            elif ftype == "UNSUBSCRIBE":
                sub_id = int(frame.get("sub_id", 0))
                self.hub.unsubscribe(sub_id)
                if sub_id in subs:
                    subs.remove(sub_id)
                conn.send({"type": "UNSUBSCRIBE_ACK", "sub_id": sub_id})
            elif ftype == "HISTORY":
                self._serve_history(conn, frame)
            elif ftype == "FILTER_DEPLOY":
                spec = FilterSpec.from_wire(frame.get("spec") or {})
                self.filters.deploy(spec, frame.get("signature") or "")
                conn.send({"type": "FILTER_ACK", "filter_id": spec.filter_id})
            elif ftype == "ADMIN":
                self._serve_admin(conn, frame)
            elif ftype == "PING":
                conn.send({"type": "PONG", "service_id": self.config.station_id})
            else:
                conn.send(error_frame("UNKNOWN_TYPE", str(ftype)))
        except (PredicateError, StoreError, KeyError, TypeError, ValueError) as e:
            conn.send(error_frame("MALFORMED", str(e)))
        except SignatureError as e:
            conn.send(error_frame("BAD_SIGNATURE", str(e)))

    def _serve_history(self, conn: Connection, frame: dict) -> None:
        predicate = Predicate.from_wire(frame.get("predicate") or {})
        width = frame.get("width")
        try:
            result = history(self.store, predicate, width=width)
        except BadWidth as e:
            conn.send(error_frame("BAD_WIDTH", str(e)))
            return
        if width:
            conn.send({"type": "HISTORY_RESULT", "width": width,
                       "bins": [dict(key="/".join(k), **b.to_wire())
                                for k, b in result]})
        else:
            conn.send({"type": "HISTORY_RESULT",
                       "values": [v.to_wire() for v in result]})

    def _serve_admin(self, conn: Connection, frame: dict) -> None:
        if not self._check_token(frame):
            conn.send(error_frame("BAD_TOKEN"))
            return
        action = frame.get("action")
        if action == "module_toggle":
            ok = self.engine.set_module_enabled(str(frame.get("module")),
                                                bool(frame.get("enabled", True)))
            if ok:
                conn.send({"type": "ADMIN_ACK", "action": action,
                           "module": frame.get("module"),
                           "enabled": bool(frame.get("enabled", True))})
            else:
                conn.send(error_frame("UNKNOWN_MODULE", str(frame.get("module"))))
        elif action == "deploy_filter":
            try:
                spec = FilterSpec.from_wire(frame.get("spec") or {})
                self.filters.deploy(spec, frame.get("signature") or "")
                conn.send({"type": "ADMIN_ACK", "action": action,
                           "filter_id": spec.filter_id})
            except SignatureError as e:
                conn.send(error_frame("BAD_SIGNATURE", str(e)))
        elif action == "restart_target":
            target = str(frame.get("target"))
            if self.restart_handler and self.restart_handler(target):
                conn.send({"type": "ADMIN_ACK", "action": action, "target": target})
            else:
                conn.send(error_frame("UNKNOWN_TARGET", target))
        else:
            conn.send(error_frame("UNKNOWN_ACTION", str(action)))
