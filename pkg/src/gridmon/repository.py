"""The aggregating repository service.

Discovers stations through the registry, subscribes to them with the
configured predicates, deploys filters, and stores everything it receives
in its own tiered store (tagged with the source service). On top of that
state it serves the HTTP API the dashboard and admin tooling use:

    GET  /api/services   current services with live status
    GET  /api/series     raw points or bins for a predicate + window
    GET  /api/stream     server-sent events: data / tree / registry / alert
    GET  /api/mst        current overlay graph + spanning tree
    GET  /api/alerts     supervisor alerts seen so far
    POST /api/admin      admin command relay (bearer token)
    POST /api/admin/sign-filter   signing helper for the dashboard

The overlay optimizer lives here: it consumes the `_links` series that
probe agents export, recomputes the tree on a fixed period and publishes
TreeUpdate events to stream clients and into the store.
"""
from __future__ import annotations

import json
import logging
import threading
import urllib.parse
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from .clock import Clock
from .metrics import MetricValue
from .overlay import MstConfig, OverlayOptimizer, TreeUpdate
from .probe import cost_from, ProbeConfig
from .registry import RegistryClient, RegistryEvent, ServiceDescriptor
from .signing import sign
from .store import BadWidth, RetentionPolicy, StoreError, TimeSeriesStore
from .subscription import (FilterSpec, Predicate, PredicateError,
                           SubscriptionHub, history)
from .wire import Connection, WireError, split_endpoint

log = logging.getLogger(__name__)


@dataclass
class RepoConfig:
    registries: list[str]
    groups: set[str]
    listen: str = "127.0.0.1:0"
    predicates: list[Predicate] = field(default_factory=lambda: [Predicate()])
    filters: list[tuple[FilterSpec, str]] = field(default_factory=list)
    admin_tokens: set[str] = field(default_factory=set)
    trust_key: str = "dev-trust-key"
    token: Optional[str] = None
    store_path: Optional[str] = None
    retention: Optional[RetentionPolicy] = None
    mst: MstConfig = field(default_factory=MstConfig)
    mst_group: Optional[str] = None      # vertices come from this group
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    link_staleness_ms: int = 300_000
    reconnect_ms: int = 2_000
    alert_log_path: Optional[str] = None

    def __post_init__(self):
        if not self.registries:
            raise ValueError("at least one registry endpoint required")
        # admin endpoints are useless without a token to accept
        if not self.admin_tokens:
            self.admin_tokens = {"admin-dev"}


class _Upstream:
    def __init__(self, descriptor: ServiceDescriptor):
        self.descriptor = descriptor
        self.conn: Optional[Connection] = None
        self.thread: Optional[threading.Thread] = None
        self.stop = threading.Event()
        self.received = 0


class LinkTable:
    """Latest directed link stats per (src, dst), fed from `_links` series."""

    def __init__(self, probe: ProbeConfig, staleness_ms: int):
        self.probe = probe
        self.staleness_ms = staleness_ms
        self._lock = threading.Lock()
        self._rows: dict[tuple[str, str], dict] = {}

    def ingest(self, values: list[MetricValue]) -> None:
        with self._lock:
            for v in values:
                if v.cluster != "_links":
                    continue
                row = self._rows.setdefault((v.farm, v.node),
                                            {"rtt_ms": None, "jitter_ms": 0.0,
                                             "loss": 0.0, "at": 0})
                if v.param in ("rtt_ms", "jitter_ms", "loss"):
                    row[v.param] = v.value
                    row["at"] = max(row["at"], v.time)

    def directed_costs(self, now: int,
                       vertices: Optional[set[str]] = None) -> dict[tuple[str, str], Optional[float]]:
        out: dict[tuple[str, str], Optional[float]] = {}
        with self._lock:
            for (src, dst), row in self._rows.items():
                if vertices is not None and (src not in vertices or dst not in vertices):
                    continue
                if row["rtt_ms"] is None or now - row["at"] > self.staleness_ms:
                    out[(src, dst)] = None
                    continue
                out[(src, dst)] = cost_from(row["rtt_ms"], row["jitter_ms"],
                                            row["loss"], self.probe)
        return out

    def rows(self) -> dict:
        with self._lock:
            return {f"{s}->{d}": dict(r) for (s, d), r in self._rows.items()}

    def drop_vertex(self, vertex: str) -> None:
        with self._lock:
            for key in [k for k in self._rows if vertex in k]:
                del self._rows[key]


class Repository:
    def __init__(self, config: RepoConfig, clock: Clock):
        self.config = config
        self.clock = clock
        self.store = TimeSeriesStore(path=config.store_path,
                                     policy=config.retention)
        self.hub = SubscriptionHub()   # serves /api/stream clients
        self.links = LinkTable(config.probe, config.link_staleness_ms)
        self.optimizer = OverlayOptimizer(config.mst, publish=self._on_tree_update)
        self.registry = RegistryClient(config.registries, clock,
                                       token=config.token)
        self._lock = threading.Lock()
        self._upstreams: dict[str, _Upstream] = {}
        self._services: dict[str, dict] = {}   # service_id -> {descriptor, status}
        self._source_of: dict[tuple, str] = {}  # series key -> source service
        self.alerts: list[dict] = []
        self.audit: list[dict] = []
        self.tree_updates: list[TreeUpdate] = []
        self.ingested = 0
        self._stream_listeners: list["_StreamFeed"] = []
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._http: Optional[ThreadingHTTPServer] = None

    # ------------------------------------------------------------ lifecycle

    @property
    def http_endpoint(self) -> str:
        host, port = self._http.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> None:
        host, port = split_endpoint(self.config.listen)
        self._http = ThreadingHTTPServer((host, port), _make_handler(self))
        self._http.daemon_threads = True
        t = threading.Thread(target=self._http.serve_forever,
                             kwargs={"poll_interval": 0.05},
                             name="repo-http", daemon=True)
        t.start()
        self._threads.append(t)
        for fn, name in ((self._discovery_loop, "repo-discovery"),
                         (self._mst_loop, "repo-mst"),
                         (self._housekeeping_loop, "repo-housekeeping")):
            t = threading.Thread(target=fn, name=name, daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        with self._lock:
            ups = list(self._upstreams.values())
        for up in ups:
            up.stop.set()
            if up.conn:
                up.conn.close()
        self.registry.close()
        if self._http:
            self._http.shutdown()
            self._http.server_close()
        for t in self._threads:
            t.join(timeout=5)
        self.store.close()

    # ------------------------------------------------------------ discovery

    def _discovery_loop(self) -> None:
        subscribed = False
        while not self._stop.is_set():
            try:
                if not subscribed:
                    self.registry.subscribe_events(self.config.groups,
                                                   self._on_registry_event)
                    subscribed = True
                found = self.registry.lookup(self.config.groups)
                for descriptor in found:
                    self._note_service(descriptor)
                    self._ensure_upstream(descriptor)
            except (OSError, WireError) as e:
                log.debug("discovery failed, retrying: %s", e)
                subscribed = False
            self.clock.sleep(self.config.reconnect_ms)

    def _on_registry_event(self, event: RegistryEvent) -> None:
        d = event.descriptor
        if event.kind == "ServiceRemoved":
            with self._lock:
                entry = self._services.get(d.service_id)
                if entry:
                    entry["status"] = "gone"
                up = self._upstreams.pop(d.service_id, None)
            if up:
                up.stop.set()
                if up.conn:
                    up.conn.close()
            if self.config.mst_group and self.config.mst_group in d.groups:
                self.links.drop_vertex(d.service_id)
        else:
            self._note_service(d)
            self._ensure_upstream(d)
        self._feed_stream("registry", {"kind": event.kind,
                                       "descriptor": d.to_wire(), "at": event.at})

    def _note_service(self, descriptor: ServiceDescriptor) -> None:
        with self._lock:
            self._services[descriptor.service_id] = {
                "descriptor": descriptor, "status": "live",
                "seen": self.clock.now_ms()}

    def _ensure_upstream(self, descriptor: ServiceDescriptor) -> None:
        if descriptor.attributes.get("kind") != "station":
            return  # reflectors and such have no subscription endpoint
        with self._lock:
            if descriptor.service_id in self._upstreams:
                return
            up = _Upstream(descriptor)
            self._upstreams[descriptor.service_id] = up
        up.thread = threading.Thread(target=self._upstream_loop, args=(up,),
                                     name=f"upstream-{descriptor.service_id}",
                                     daemon=True)
        up.thread.start()

    def _upstream_loop(self, up: _Upstream) -> None:
        backoff_ms = 500.0
        while not up.stop.is_set() and not self._stop.is_set():
            try:
                conn = Connection.open_endpoint(up.descriptor.endpoint)
                up.conn = conn
                for predicate in self.config.predicates:
                    conn.send({"type": "SUBSCRIBE",
                               "predicate": predicate.to_wire()})
                    ack = conn.recv()
                    if ack is None:
                        raise WireError("CONNECTION_CLOSED")
                for spec, signature in self.config.filters:
                    conn.send({"type": "FILTER_DEPLOY", "spec": spec.to_wire(),
                               "signature": signature})
                    conn.recv()
                backoff_ms = 500.0
                while not up.stop.is_set():
                    frame = conn.recv()
                    if frame is None:
                        break
                    if frame.get("type") == "DATA":
                        values = [MetricValue.from_wire(v)
                                  for v in frame.get("values", [])]
                        up.received += len(values)
                        self.ingest(values, source=up.descriptor.service_id)
            except (OSError, WireError, ValueError, KeyError) as e:
                log.debug("upstream %s: %s", up.descriptor.service_id, e)
            finally:
                if up.conn:
                    up.conn.close()
                    up.conn = None
            if up.stop.is_set() or self._stop.is_set():
                return
            self.clock.sleep(backoff_ms)
            backoff_ms = min(backoff_ms * 2, 30_000)

    def upstream_count(self) -> int:
        with self._lock:
            return sum(1 for up in self._upstreams.values()
                       if up.conn is not None)

    # ------------------------------------------------------------- ingest

    def ingest(self, values: list[MetricValue], source: str = "local") -> int:
        accepted = self.store.insert(values)
        self.ingested += accepted
        with self._lock:
            for v in values:
                self._source_of[v.key()] = source
        self.links.ingest(values)
        self.hub.publish(values)
        self._feed_stream_values(values)
        return accepted

    def record_alert(self, alert: dict) -> None:
        self.alerts.append(alert)
        self._feed_stream("alert", alert)

    # ------------------------------------------------------------- overlay

    def _mst_vertices(self) -> Optional[set[str]]:
        if not self.config.mst_group:
            return None
        with self._lock:
            return {sid for sid, entry in self._services.items()
                    if entry["status"] == "live"
                    and self.config.mst_group in entry["descriptor"].groups}

    def _mst_loop(self) -> None:
        while not self._stop.is_set():
            self.clock.sleep(self.config.mst.recompute_period_ms)
            if self._stop.is_set():
                return
            try:
                self.recompute_mst()
            except Exception:
                log.exception("mst recompute failed")

    def recompute_mst(self) -> Optional[TreeUpdate]:
        now = self.clock.now_ms()
        vertices = self._mst_vertices()
        costs = self.links.directed_costs(now, vertices)
        return self.optimizer.recompute(costs, vertices)

    def _on_tree_update(self, update: TreeUpdate) -> None:
        self.tree_updates.append(update)
        now = self.clock.now_ms()
        synth = [MetricValue("overlay", "_mst", "_tree", "total_weight", now,
                             update.total_weight),
                 MetricValue("overlay", "_mst", "_tree", "epoch", now,
                             float(update.epoch))]
        for e in update.edges:
            if e["w"] is not None:
                synth.append(MetricValue("overlay", "_mst", f"{e['u']}|{e['v']}",
                                         "w", now, e["w"]))
        self.store.insert(synth)
        self.hub.publish(synth)
        self._feed_stream("tree", update.to_wire())

    # ------------------------------------------------------------- admin

    def admin(self, command: dict, token: Optional[str]) -> tuple[int, dict]:
        """Execute one admin command; always writes exactly one audit record."""
        kind = command.get("kind")
        target = command.get("target")
        allowed = token in self.config.admin_tokens
        record = {"at": self.clock.now_ms(), "kind": kind, "target": target,
                  "allowed": allowed}
        self.audit.append(record)
        if not allowed:
            record["result"] = "denied"
            return 403, {"error": "bad token"}
        try:
            if kind == "DEPLOY_FILTER":
                result = self._admin_forward(target, {
                    "type": "ADMIN", "action": "deploy_filter",
                    "spec": command.get("payload", {}).get("spec"),
                    "signature": command.get("payload", {}).get("signature")})
            elif kind == "MODULE_TOGGLE":
                payload = command.get("payload", {})
                result = self._admin_forward(target, {
                    "type": "ADMIN", "action": "module_toggle",
                    "module": payload.get("module"),
                    "enabled": bool(payload.get("enabled", True))})
            elif kind == "RESTART_TARGET":
                result = self._admin_forward(target, {
                    "type": "ADMIN", "action": "restart_target",
                    "target": command.get("payload", {}).get("node", target)})
            else:
                record["result"] = "unknown kind"
                return 400, {"error": f"unknown admin kind {kind!r}"}
        except (OSError, WireError) as e:
            record["result"] = f"error: {e}"
            return 502, {"error": str(e)}
        record["result"] = "ok"
        return 200, {"result": result}

    def _admin_forward(self, service_id: str, frame: dict) -> dict:
        with self._lock:
            entry = self._services.get(service_id)
        if entry is None:
            raise WireError("UNKNOWN_TARGET", f"no such service {service_id}")
        endpoint = entry["descriptor"].endpoint
        station_token = self.config.token
        if station_token is not None:
            frame["token"] = station_token
        conn = Connection.open_endpoint(endpoint)
        try:
            return conn.rpc(frame)
        finally:
            conn.close()

    # ------------------------------------------------------------- streams

    def _feed_stream(self, event: str, payload: dict) -> None:
        with self._lock:
            feeds = list(self._stream_listeners)
        for feed in feeds:
            feed.offer(event, payload)

    def _feed_stream_values(self, values: list[MetricValue]) -> None:
        with self._lock:
            feeds = [f for f in self._stream_listeners if f.predicate is not None]
        for feed in feeds:
            matched = [v.to_wire() for v in values if feed.predicate.matches(v)]
            if matched:
                feed.offer("data", {"values": matched})

    def attach_stream(self, feed: "_StreamFeed") -> None:
        with self._lock:
            self._stream_listeners.append(feed)

    def detach_stream(self, feed: "_StreamFeed") -> None:
        with self._lock:
            if feed in self._stream_listeners:
                self._stream_listeners.remove(feed)

    # --------------------------------------------------------- housekeeping

    def _housekeeping_loop(self) -> None:
        last_compact = self.clock.now_ms()
        while not self._stop.is_set():
            self.clock.sleep(1_000)
            self.store.flush()
            now = self.clock.now_ms()
            if now - last_compact >= 60_000:
                self.store.compact(now)
                last_compact = now

    # ------------------------------------------------------------- queries

    def services_payload(self) -> dict:
        with self._lock:
            services = []
            for sid in sorted(self._services):
                entry = self._services[sid]
                d: ServiceDescriptor = entry["descriptor"]
                services.append({**d.to_wire(), "status": entry["status"],
                                 "seen": entry["seen"]})
        return {"services": services}

    def series_payload(self, params: dict) -> dict:
        predicate = Predicate(
            farm_re=params.get("farm", ".*"), cluster_re=params.get("cluster", ".*"),
            node_re=params.get("node", ".*"), param_re=params.get("param", ".*"),
            t1=int(params["t1"]) if "t1" in params else None,
            t2=int(params["t2"]) if "t2" in params else None,
            vmin=float(params["vmin"]) if "vmin" in params else None,
            vmax=float(params["vmax"]) if "vmax" in params else None)
        if predicate.t1 is None or predicate.t2 is None:
            now = self.clock.now_ms()
            predicate = Predicate(predicate.farm_re, predicate.cluster_re,
                                  predicate.node_re, predicate.param_re,
                                  t1=now - 3_600_000, t2=now,
                                  vmin=predicate.vmin, vmax=predicate.vmax)
        width = int(params["width"]) if "width" in params else None
        source_filter = params.get("source")
        out: dict[str, dict] = {}
        if width:
            for key, b in history(self.store, predicate, width=width):
                kstr = "/".join(key)
                entry = out.setdefault(kstr, self._series_meta(key, width=width))
                entry["bins"].append(b.to_wire())
        else:
            for v in history(self.store, predicate):
                kstr = v.key_str()
                entry = out.setdefault(kstr, self._series_meta(v.key()))
                entry["points"].append([v.time, v.value])
        series = [s for s in out.values()
                  if source_filter is None or s["source"] == source_filter]
        return {"series": series, "t1": predicate.t1, "t2": predicate.t2,
                "width": width}

    def _series_meta(self, key, width: Optional[int] = None) -> dict:
        with self._lock:
            source = self._source_of.get(key, "unknown")
        meta = {"key": "/".join(key), "farm": key[0], "cluster": key[1],
                "node": key[2], "param": key[3], "source": source}
        if width:
            meta["width"] = width
            meta["bins"] = []
        else:
            meta["points"] = []
        return meta

    def mst_payload(self) -> dict:
        tree = self.optimizer.tree
        graph = self.optimizer.graph
        edges = [{"u": u, "v": v, "w": e.w,
                  "in_tree": (u, v) in (tree.edges if tree else frozenset())}
                 for (u, v), e in sorted(graph.edges.items())]
        return {
            "epoch": tree.epoch if tree else 0,
            "total_weight": tree.total_weight if tree else 0.0,
            "components": tree.components if tree else 0,
            "vertices": sorted(graph.vertices),
            "edges": edges,
            "updates": len(self.tree_updates),
        }

    def alerts_payload(self) -> dict:
        alerts = list(self.alerts)
        if self.config.alert_log_path:
            try:
                with open(self.config.alert_log_path, encoding="utf-8") as f:
                    seen = {json.dumps(a, sort_keys=True) for a in alerts}
                    for line in f:
                        line = line.strip()
                        if not line:
                            continue
                        a = json.loads(line)
                        if json.dumps(a, sort_keys=True) not in seen:
                            alerts.append(a)
            except OSError:
                pass
        return {"alerts": alerts}


class _StreamFeed:
    """One /api/stream client's outbound event queue."""

    def __init__(self, predicate: Optional[Predicate], maxsize: int = 1000):
        import queue as _q

        self.predicate = predicate
        self.queue = _q.Queue(maxsize=maxsize)
        self.overflowed = False

    def offer(self, event: str, payload: dict) -> None:
        try:
            self.queue.put_nowait((event, payload))
        except Exception:
            self.overflowed = True  # slow consumer: disconnect policy


def _make_handler(repo: Repository):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet
            log.debug("http: " + fmt, *args)

        # -------------------------------------------------------- helpers

        def _json(self, code: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def do_OPTIONS(self) -> None:  # CORS preflight for the dashboard
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers",
                             "Authorization, Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def _bearer(self) -> Optional[str]:
            auth = self.headers.get("Authorization", "")
            if auth.startswith("Bearer "):
                return auth[7:].strip()
            return None

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length <= 0:
                return {}
            return json.loads(self.rfile.read(length).decode("utf-8"))

        # --------------------------------------------------------- routes

        def do_GET(self) -> None:
            parsed = urllib.parse.urlparse(self.path)
            params = {k: v[0] for k, v in
                      urllib.parse.parse_qs(parsed.query).items()}
            try:
                if parsed.path == "/api/services":
                    self._json(200, repo.services_payload())
                elif parsed.path == "/api/series":
                    self._json(200, repo.series_payload(params))
                elif parsed.path == "/api/mst":
                    self._json(200, repo.mst_payload())
                elif parsed.path == "/api/alerts":
                    self._json(200, repo.alerts_payload())
                elif parsed.path == "/api/stream":
                    self._serve_stream(params)
                else:
                    self._json(404, {"error": "no such endpoint"})
            except BadWidth as e:
                self._json(400, {"error": str(e), "valid_base": e.valid_base})
            except (PredicateError, StoreError, ValueError) as e:
                self._json(400, {"error": str(e)})
            except BrokenPipeError:
                pass

        def do_POST(self) -> None:
            parsed = urllib.parse.urlparse(self.path)
            try:
                if parsed.path == "/api/admin":
                    code, payload = repo.admin(self._body(), self._bearer())
                    self._json(code, payload)
                elif parsed.path == "/api/admin/sign-filter":
                    self._sign_filter()
                else:
                    self._json(404, {"error": "no such endpoint"})
            except (json.JSONDecodeError, PredicateError, ValueError) as e:
                self._json(400, {"error": str(e)})
            except BrokenPipeError:
                pass

        def _sign_filter(self) -> None:
            token = self._bearer()
            if token not in repo.config.admin_tokens:
                repo.audit.append({"at": repo.clock.now_ms(),
                                   "kind": "SIGN_FILTER", "allowed": False})
                self._json(403, {"error": "bad token"})
                return
            body = self._body()
            spec = FilterSpec.from_wire(body.get("spec") or {})
            signature = sign(repo.config.trust_key, spec.signable())
            repo.audit.append({"at": repo.clock.now_ms(), "kind": "SIGN_FILTER",
                               "allowed": True, "filter_id": spec.filter_id})
            self._json(200, {"spec": spec.to_wire(), "signature": signature})

        def _serve_stream(self, params: dict) -> None:
            predicate = None
            if any(k in params for k in ("farm", "cluster", "node", "param")):
                predicate = Predicate(
                    farm_re=params.get("farm", ".*"),
                    cluster_re=params.get("cluster", ".*"),
                    node_re=params.get("node", ".*"),
                    param_re=params.get("param", ".*"))
            feed = _StreamFeed(predicate)
            repo.attach_stream(feed)
            try:
                self.send_response(200)
                self.send_header("Content-Type", "text/event-stream")
                self.send_header("Cache-Control", "no-cache")
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                self.wfile.write(b"event: hello\ndata: {}\n\n")
                self.wfile.flush()
                while not feed.overflowed and not repo._stop.is_set():
                    try:
                        event, payload = feed.queue.get(timeout=0.5)
                    except Exception:
                        self.wfile.write(b": keepalive\n\n")
                        self.wfile.flush()
                        continue
                    data = json.dumps(payload)
                    self.wfile.write(f"event: {event}\ndata: {data}\n\n".encode())
                    self.wfile.flush()
            except (BrokenPipeError, ConnectionError, OSError):
                pass
            finally:
                repo.detach_stream(feed)

    return Handler
