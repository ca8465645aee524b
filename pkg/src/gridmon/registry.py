"""Lookup service: lease-based registration, discovery and change events.

Services register under one or more groups with a set of attributes and a
lease they must keep renewing; a stopped service falls out of lookup
within lease duration + sweep period and every subscriber hears about it.
Two registries configured with common groups replicate membership of
those groups to each other (periodic anti-entropy plus immediate event
push), so the registration network survives the loss of any one of them.
"""
from __future__ import annotations

import itertools
import logging
import queue
import re
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .clock import Clock
from .wire import (Connection, FrameServer, WireError, error_frame,
                   split_endpoint, PROTO_VERSION)

log = logging.getLogger(__name__)

SERVICE_ADDED = "ServiceAdded"
SERVICE_REMOVED = "ServiceRemoved"
ATTRIBUTE_CHANGED = "AttributeChanged"


class RegistryError(Exception):
    def __init__(self, code: str, msg: str = ""):
        super().__init__(f"{code}: {msg}" if msg else code)
        self.code = code
        self.msg = msg


@dataclass(frozen=True)
class ServiceDescriptor:
    service_id: str
    groups: frozenset[str]
    attributes: dict[str, str]
    endpoint: str
    proto_version: int = PROTO_VERSION
    registered_at: int = 0

    def validate(self) -> None:
        if not self.service_id or not isinstance(self.service_id, str):
            raise RegistryError("MALFORMED", "service_id required")
        if not self.groups:
            raise RegistryError("MALFORMED", "groups must be non-empty")
        if self.proto_version < 1:
            raise RegistryError("MALFORMED", "proto_version must be >= 1")
        if ":" not in self.endpoint:
            raise RegistryError("MALFORMED", "endpoint must be host:port")
        split_endpoint(self.endpoint)

    def to_wire(self) -> dict:
        return {"service_id": self.service_id, "groups": sorted(self.groups),
                "attributes": dict(self.attributes), "endpoint": self.endpoint,
                "proto_version": self.proto_version,
                "registered_at": self.registered_at}

    @classmethod
    def from_wire(cls, d: dict) -> "ServiceDescriptor":
        try:
            return cls(service_id=str(d["service_id"]),
                       groups=frozenset(str(g) for g in d["groups"]),
                       attributes={str(k): str(v)
                                   for k, v in dict(d.get("attributes") or {}).items()},
                       endpoint=str(d["endpoint"]),
                       proto_version=int(d.get("proto_version", 1)),
                       registered_at=int(d.get("registered_at", 0)))
        except (KeyError, TypeError, ValueError) as e:
            raise RegistryError("MALFORMED", f"bad descriptor: {e}") from e


@dataclass(frozen=True)
class Lease:
    service_id: str
    duration_ms: int
    expires_at: int

    def to_wire(self) -> dict:
        return {"service_id": self.service_id, "duration_ms": self.duration_ms,
                "expires_at": self.expires_at}


@dataclass(frozen=True)
class RegistryEvent:
    kind: str
    descriptor: ServiceDescriptor
    at: int

    def to_wire(self) -> dict:
        return {"type": "EVENT", "kind": self.kind,
                "descriptor": self.descriptor.to_wire(), "at": self.at}


class RegistryCore:
    """The registry state machine; thread-safe, transport-agnostic.

    Event delivery is decoupled per subscriber through a bounded queue and
    writer thread; a subscriber that cannot keep up is disconnected
    without affecting anyone else.
    """

    def __init__(self, clock: Clock, groups: Optional[set[str]] = None,
                 min_lease_ms: int = 5_000, max_lease_ms: int = 300_000,
                 sweep_ms: int = 1_000, event_queue_size: int = 1024):
        self.clock = clock
        self.groups = set(groups) if groups else None  # None = serve all groups
        self.min_lease_ms = min_lease_ms
        self.max_lease_ms = max_lease_ms
        self.sweep_ms = sweep_ms
        self.event_queue_size = event_queue_size
        self._lock = threading.RLock()
        self._services: dict[str, tuple[ServiceDescriptor, Lease]] = {}
        self._subs: dict[int, "_EventSub"] = {}
        self._sub_ids = itertools.count(1)
        self.peer_push: Optional[Callable[[RegistryEvent], None]] = None

    # ---------------------------------------------------------- leases

    def serves(self, groups) -> bool:
        return self.groups is None or bool(self.groups & set(groups))

    def _grant(self, service_id: str, requested_ms: int, now: int) -> Lease:
        duration = max(self.min_lease_ms, min(int(requested_ms), self.max_lease_ms))
        return Lease(service_id=service_id, duration_ms=duration,
                     expires_at=now + duration)

    def register(self, descriptor: ServiceDescriptor, requested_ms: int,
                 emit: bool = True) -> Lease:
        descriptor.validate()
        if requested_ms <= 0:
            raise RegistryError("MALFORMED", "requested_ms must be positive")
        if not self.serves(descriptor.groups):
            raise RegistryError("WRONG_GROUPS",
                                "registry does not serve any of these groups")
        now = self.clock.now_ms()
        if descriptor.registered_at == 0:
            descriptor = ServiceDescriptor(
                descriptor.service_id, descriptor.groups,
                dict(descriptor.attributes), descriptor.endpoint,
                descriptor.proto_version, registered_at=now)
        lease = self._grant(descriptor.service_id, requested_ms, now)
        with self._lock:
            prev = self._services.get(descriptor.service_id)
            self._services[descriptor.service_id] = (descriptor, lease)
        if emit:
            if prev is None:
                self._emit(RegistryEvent(SERVICE_ADDED, descriptor, now))
            elif (prev[0].attributes != descriptor.attributes
                  or prev[0].groups != descriptor.groups
                  or prev[0].endpoint != descriptor.endpoint):
                self._emit(RegistryEvent(ATTRIBUTE_CHANGED, descriptor, now))
        return lease

    def renew(self, service_id: str, requested_ms: int) -> Lease:
        now = self.clock.now_ms()
        with self._lock:
            entry = self._services.get(service_id)
            if entry is None:
                raise RegistryError("NOT_REGISTERED",
                                    f"{service_id} must re-register")
            lease = self._grant(service_id, requested_ms, now)
            self._services[service_id] = (entry[0], lease)
        return lease

    def sweep_leases(self, now: Optional[int] = None) -> list[str]:
        """Drop every lease with expires_at < now; one removal event each."""
        now = self.clock.now_ms() if now is None else now
        removed: list[tuple[str, ServiceDescriptor]] = []
        with self._lock:
            for sid in sorted(self._services):
                descriptor, lease = self._services[sid]
                if lease.expires_at < now:
                    del self._services[sid]
                    removed.append((sid, descriptor))
        for _, descriptor in removed:
            self._emit(RegistryEvent(SERVICE_REMOVED, descriptor, now))
        return [sid for sid, _ in removed]

    # --------------------------------------------------------- discovery

    def lookup(self, groups: set[str],
               attr_match: Optional[dict[str, str]] = None) -> list[ServiceDescriptor]:
        if not groups:
            raise RegistryError("MALFORMED", "lookup groups must be non-empty")
        try:
            patterns = {k: re.compile(v) for k, v in (attr_match or {}).items()}
        except re.error as e:
            raise RegistryError("BAD_REGEX", str(e)) from e
        out = []
        with self._lock:
            for sid in sorted(self._services):
                descriptor, _ = self._services[sid]
                if not (descriptor.groups & set(groups)):
                    continue
                ok = True
                for name, pat in patterns.items():
                    attr = descriptor.attributes.get(name)
                    if attr is None or not pat.fullmatch(attr):
                        ok = False
                        break
                if ok:
                    out.append(descriptor)
        return out

    def members(self, groups: Optional[set[str]] = None) -> list[ServiceDescriptor]:
        with self._lock:
            out = [d for d, _ in self._services.values()
                   if groups is None or (d.groups & groups)]
        return sorted(out, key=lambda d: d.service_id)

    # ------------------------------------------------------------ events

    def subscribe_events(self, groups: set[str],
                         deliver: Callable[[RegistryEvent], None]) -> int:
        """Snapshot of current members as ServiceAdded, then live events."""
        sub = _EventSub(next(self._sub_ids), set(groups), deliver,
                        self.event_queue_size)
        now = self.clock.now_ms()
        with self._lock:
            snapshot = self.members(set(groups))
            self._subs[sub.sub_id] = sub
            for d in snapshot:
                sub.offer(RegistryEvent(SERVICE_ADDED, d, now))
        sub.start(self._sub_exit)
        return sub.sub_id

    def unsubscribe_events(self, sub_id: int) -> None:
        with self._lock:
            sub = self._subs.pop(sub_id, None)
        if sub:
            sub.stop()

    def _sub_exit(self, sub: "_EventSub") -> None:
        with self._lock:
            self._subs.pop(sub.sub_id, None)

    def _emit(self, event: RegistryEvent) -> None:
        with self._lock:
            subs = list(self._subs.values())
        overflowed = []
        for sub in subs:
            if sub.groups & event.descriptor.groups:
                if not sub.offer(event):
                    overflowed.append(sub)
        for sub in overflowed:
            log.warning("event subscriber %d overflowed, disconnecting", sub.sub_id)
            self.unsubscribe_events(sub.sub_id)
        if self.peer_push:
            try:
                self.peer_push(event)
            except Exception:
                log.debug("peer push failed", exc_info=True)

    # ------------------------------------------------------- replication

    def state_for_groups(self, groups: set[str]) -> list[dict]:
        """Wire-ready (descriptor, lease) pairs for services in these groups."""
        with self._lock:
            out = []
            for sid in sorted(self._services):
                descriptor, lease = self._services[sid]
                if descriptor.groups & groups:
                    out.append({"descriptor": descriptor.to_wire(),
                                "lease": lease.to_wire()})
        return out

    def apply_peer_state(self, entries: list[dict], common: set[str]) -> int:
        """Union-merge peer state for common groups; newest registration wins.

        Events fire only for descriptors newly learned here; removals come
        from local sweeps or pushed peer events, not from absence.
        """
        applied = 0
        now = self.clock.now_ms()
        for entry in entries:
            descriptor = ServiceDescriptor.from_wire(entry["descriptor"])
            if not (descriptor.groups & common):
                continue
            lease_d = entry["lease"]
            lease = Lease(service_id=descriptor.service_id,
                          duration_ms=int(lease_d["duration_ms"]),
                          expires_at=int(lease_d["expires_at"]))
            with self._lock:
                prev = self._services.get(descriptor.service_id)
                if prev is None:
                    self._services[descriptor.service_id] = (descriptor, lease)
                    self._emit(RegistryEvent(SERVICE_ADDED, descriptor, now))
                    applied += 1
                elif descriptor.registered_at > prev[0].registered_at:
                    self._services[descriptor.service_id] = (descriptor, lease)
                    applied += 1
                elif (descriptor.registered_at == prev[0].registered_at
                      and lease.expires_at > prev[1].expires_at):
                    self._services[descriptor.service_id] = (prev[0], lease)
        return applied

    def apply_peer_event(self, event_d: dict) -> None:
        descriptor = ServiceDescriptor.from_wire(event_d["descriptor"])
        if not self.serves(descriptor.groups):
            return
        kind = event_d.get("kind")
        now = self.clock.now_ms()
        with self._lock:
            prev = self._services.get(descriptor.service_id)
            if kind == SERVICE_REMOVED:
                if prev is not None:
                    del self._services[descriptor.service_id]
                    self._emit(RegistryEvent(SERVICE_REMOVED, descriptor, now))
                return
            lease_d = event_d.get("lease")
            expires = int(lease_d["expires_at"]) if lease_d else now + self.min_lease_ms
            duration = int(lease_d["duration_ms"]) if lease_d else self.min_lease_ms
            lease = Lease(descriptor.service_id, duration, expires)
            if prev is None:
                self._services[descriptor.service_id] = (descriptor, lease)
                self._emit(RegistryEvent(SERVICE_ADDED, descriptor, now))
            elif descriptor.registered_at >= prev[0].registered_at:
                self._services[descriptor.service_id] = (descriptor, lease)
                if kind == ATTRIBUTE_CHANGED:
                    self._emit(RegistryEvent(ATTRIBUTE_CHANGED, descriptor, now))

    def lease_of(self, service_id: str) -> Optional[Lease]:
        with self._lock:
            entry = self._services.get(service_id)
            return entry[1] if entry else None


class _EventSub:
    def __init__(self, sub_id: int, groups: set[str],
                 deliver: Callable[[RegistryEvent], None], qsize: int):
        self.sub_id = sub_id
        self.groups = groups
        self.deliver = deliver
        self.queue: queue.Queue = queue.Queue(maxsize=qsize)
        self.thread: Optional[threading.Thread] = None

    def offer(self, event: RegistryEvent) -> bool:
        try:
            self.queue.put_nowait(event)
            return True
        except queue.Full:
            return False

    def start(self, on_exit: Callable[["_EventSub"], None]) -> None:
        def run():
            try:
                while True:
                    event = self.queue.get()
                    if event is None:
                        break
                    self.deliver(event)
            except Exception:
                pass  # dead consumer: drop the subscription
            finally:
                on_exit(self)

        self.thread = threading.Thread(target=run, name=f"reg-sub-{self.sub_id}",
                                       daemon=True)
        self.thread.start()

    def stop(self) -> None:
        self.queue.put(None)


# ---------------------------------------------------------------- server

class RegistryServer:
    """Exposes a RegistryCore over the control protocol and replicates to peers."""

    def __init__(self, core: RegistryCore, listen: str = "127.0.0.1:0",
                 peers: Optional[list[str]] = None, replicate_ms: int = 5_000,
                 token: Optional[str] = None):
        self.core = core
        self.peers = list(peers or [])
        self.replicate_ms = replicate_ms
        self.token = token
        self.server = FrameServer(listen, self._handle)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        core.peer_push = self._push_event

    @property
    def endpoint(self) -> str:
        return self.server.endpoint

    def start(self) -> None:
        self.server.start()
        for fn, name in ((self._sweep_loop, "registry-sweep"),
                         (self._replicate_loop, "registry-replicate")):
            t = threading.Thread(target=fn, name=name, daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        self.server.stop()
        for t in self._threads:
            t.join(timeout=2)

    def _sweep_loop(self) -> None:
        while not self._stop.is_set():
            self.core.sweep_leases()
            self.core.clock.sleep(self.core.sweep_ms)

    # ------------------------------------------------------- replication

    def _common_groups(self) -> set[str]:
        return self.core.groups if self.core.groups is not None else set()

    def _replicate_loop(self) -> None:
        backoff = {peer: self.replicate_ms for peer in self.peers}
        while not self._stop.is_set():
            for peer in self.peers:
                if self._stop.is_set():
                    return
                try:
                    self.sync_peer(peer)
                    backoff[peer] = self.replicate_ms
                except (OSError, WireError) as e:
                    log.debug("peer %s unreachable: %s", peer, e)
                    backoff[peer] = min(backoff[peer] * 2, 60_000)
            self.core.clock.sleep(min(backoff.values(), default=self.replicate_ms))

    def sync_peer(self, peer: str) -> int:
        """One full anti-entropy round with one peer; returns entries applied.

        Two steps on one connection so only common-group state ever crosses
        the wire: we announce our groups, the peer answers with the common
        set and its state for it, then we send ours back.
        """
        groups = self.core.groups
        conn = Connection.open_endpoint(peer)
        try:
            reply = conn.rpc({
                "type": "PEER_SYNC",
                "groups": sorted(groups) if groups is not None else None,
            })
            common = set(reply.get("common") or [])
            if groups is not None:
                common &= groups
            conn.send({"type": "PEER_STATE",
                       "state": self.core.state_for_groups(common)})
        finally:
            conn.close()
        return self.core.apply_peer_state(reply.get("state") or [], common)

    def _push_event(self, event: RegistryEvent) -> None:
        if not self.peers:
            return
        frame = {"type": "PEER_EVENT", "kind": event.kind,
                 "descriptor": event.descriptor.to_wire()}
        lease = self.core.lease_of(event.descriptor.service_id)
        if lease:
            frame["lease"] = lease.to_wire()
        for peer in self.peers:
            try:
                conn = Connection.open_endpoint(peer, timeout_s=2.0)
                try:
                    conn.send(frame)
                finally:
                    conn.close()
            except OSError:
                pass  # anti-entropy will catch the peer up

    # ---------------------------------------------------------- protocol

    def _check_token(self, frame: dict) -> bool:
        return self.token is None or frame.get("token") == self.token

    def _handle(self, conn: Connection) -> None:
        while True:
            frame = conn.recv()
            if frame is None:
                return
            if not frame:
                continue
            ftype = frame.get("type")
            try:
                if not self._check_token(frame):
                    conn.send(error_frame("BAD_TOKEN"))
                    continue
                if ftype == "REGISTER":
                    descriptor = ServiceDescriptor.from_wire(frame["descriptor"])
                    lease = self.core.register(descriptor, int(frame["duration_ms"]))
                    conn.send({"type": "REGISTER_ACK", "lease": lease.to_wire()})
                elif ftype == "RENEW":
                    lease = self.core.renew(str(frame["service_id"]),
                                            int(frame["duration_ms"]))
                    conn.send({"type": "RENEW_ACK", "lease": lease.to_wire()})
                elif ftype == "LOOKUP":
                    found = self.core.lookup(set(frame.get("groups") or []),
                                             dict(frame.get("attr_match") or {}))
                    conn.send({"type": "LOOKUP_RESULT",
                               "services": [d.to_wire() for d in found]})
                elif ftype == "SUBSCRIBE_EVENTS":
                    self._serve_subscription(conn, set(frame.get("groups") or []))
                    return  # connection now belongs to the event stream
                elif ftype == "PEER_SYNC":
                    self._serve_peer_sync(conn, frame)
                elif ftype == "PEER_EVENT":
                    self.core.apply_peer_event(frame)
                else:
                    conn.send(error_frame("UNKNOWN_TYPE", str(ftype)))
            except RegistryError as e:
                conn.send(error_frame(e.code, e.msg))
            except (KeyError, TypeError, ValueError) as e:
                conn.send(error_frame("MALFORMED", str(e)))

    def _serve_subscription(self, conn: Connection, groups: set[str]) -> None:
        if not groups:
            conn.send(error_frame("MALFORMED", "groups must be non-empty"))
            return
        done = threading.Event()

        def deliver(event: RegistryEvent) -> None:
            try:
                conn.send(event.to_wire())
            except OSError:
                done.set()
                raise  # kills the subscriber thread, cleaning up

        # ack before attaching: the snapshot starts flowing immediately
        conn.send({"type": "SUBSCRIBE_EVENTS_ACK"})
        sub_id = self.core.subscribe_events(groups, deliver)
        try:
            while not done.is_set():
                frame = conn.recv()  # block until client hangs up
                if frame is None:
                    break
        finally:
            self.core.unsubscribe_events(sub_id)

    def _serve_peer_sync(self, conn: Connection, frame: dict) -> None:
        peer_groups = frame.get("groups")
        mine = self.core.groups
        if peer_groups is None and mine is None:
            common = {g for d in self.core.members() for g in d.groups}
        elif peer_groups is None:
            common = set(mine)
        elif mine is None:
            common = set(peer_groups)
        else:
            common = set(peer_groups) & mine
        conn.send({"type": "PEER_SYNC_ACK", "common": sorted(common),
                   "state": self.core.state_for_groups(common)})
        follow = conn.recv()
        if follow and follow.get("type") == "PEER_STATE":
            self.core.apply_peer_state(follow.get("state") or [], common)


# ---------------------------------------------------------------- client

class RegistryClient:
    """Client side of the registry protocol, with a lease-renewal loop."""

    def __init__(self, endpoints: list[str], clock: Clock,
                 token: Optional[str] = None):
        if not endpoints:
            raise ValueError("at least one registry endpoint required")
        self.endpoints = list(endpoints)
        self.clock = clock
        self.token = token
        self._renew_stop = threading.Event()
        self._renew_thread: Optional[threading.Thread] = None
        self._sub_conns: list[Connection] = []

    def _frame(self, frame: dict) -> dict:
        if self.token is not None:
            frame["token"] = self.token
        return frame

    def _rpc_any(self, frame: dict) -> dict:
        last: Exception = RuntimeError("no endpoints")
        for endpoint in self.endpoints:
            try:
                conn = Connection.open_endpoint(endpoint)
                try:
                    return conn.rpc(self._frame(dict(frame)))
                finally:
                    conn.close()
            except (OSError, WireError) as e:
                last = e
        raise last

    def _rpc_all(self, frame: dict) -> list[dict]:
        replies, last = [], None
        for endpoint in self.endpoints:
            try:
                conn = Connection.open_endpoint(endpoint)
                try:
                    replies.append(conn.rpc(self._frame(dict(frame))))
                finally:
                    conn.close()
            except (OSError, WireError) as e:
                last = e
        if not replies and last is not None:
            raise last
        return replies

    def register(self, descriptor: ServiceDescriptor, duration_ms: int) -> Lease:
        replies = self._rpc_all({"type": "REGISTER",
                                 "descriptor": descriptor.to_wire(),
                                 "duration_ms": duration_ms})
        lease_d = replies[0]["lease"]
        return Lease(lease_d["service_id"], int(lease_d["duration_ms"]),
                     int(lease_d["expires_at"]))

    def renew(self, service_id: str, duration_ms: int) -> Lease:
        replies = self._rpc_all({"type": "RENEW", "service_id": service_id,
                                 "duration_ms": duration_ms})
        lease_d = replies[0]["lease"]
        return Lease(lease_d["service_id"], int(lease_d["duration_ms"]),
                     int(lease_d["expires_at"]))

    def lookup(self, groups: set[str],
               attr_match: Optional[dict[str, str]] = None) -> list[ServiceDescriptor]:
        reply = self._rpc_any({"type": "LOOKUP", "groups": sorted(groups),
                               "attr_match": attr_match or {}})
        found = [ServiceDescriptor.from_wire(d) for d in reply.get("services", [])]
        # refuse descriptors from a future protocol we do not understand
        return [d for d in found if d.proto_version <= PROTO_VERSION]

    def start_renewing(self, descriptor: ServiceDescriptor, duration_ms: int,
                       on_lost: Optional[Callable[[], None]] = None) -> Lease:
        """Register and keep the lease alive from a background thread."""
        lease = self.register(descriptor, duration_ms)

        def loop():
            while not self._renew_stop.is_set():
                self.clock.sleep(lease.duration_ms / 2)
                if self._renew_stop.is_set():
                    return
                try:
                    self.renew(descriptor.service_id, duration_ms)
                except WireError as e:
                    if e.code == "NOT_REGISTERED":
                        try:
                            self.register(descriptor, duration_ms)
                        except (OSError, WireError):
                            pass
                    if on_lost:
                        on_lost()
                except OSError:
                    pass

        self._renew_thread = threading.Thread(target=loop, name="lease-renew",
                                              daemon=True)
        self._renew_thread.start()
        return lease

    def stop_renewing(self) -> None:
        self._renew_stop.set()
        if self._renew_thread:
            self._renew_thread.join(timeout=2)

    @property
    def is_renewing(self) -> bool:
        return self._renew_thread is not None and not self._renew_stop.is_set()

    def subscribe_events(self, groups: set[str],
                         deliver: Callable[[RegistryEvent], None]) -> Connection:
        """Open an event stream; deliver() runs on the stream's reader thread."""
        conn = Connection.open_endpoint(self.endpoints[0])
        conn.send(self._frame({"type": "SUBSCRIBE_EVENTS",
                               "groups": sorted(groups)}))
        ack = conn.recv()
        if ack is None or ack.get("type") != "SUBSCRIBE_EVENTS_ACK":
            conn.close()
            raise WireError("SUBSCRIBE_FAILED", str(ack))

        def reader():
            try:
                while True:
                    frame = conn.recv()
                    if frame is None:
                        return
                    if frame.get("type") == "EVENT":
                        deliver(RegistryEvent(
                            kind=frame["kind"],
                            descriptor=ServiceDescriptor.from_wire(frame["descriptor"]),
                            at=int(frame.get("at", 0))))
            except (OSError, WireError, KeyError, ValueError):
                pass

        threading.Thread(target=reader, name="registry-events", daemon=True).start()
        self._sub_conns.append(conn)
        return conn

    def close(self) -> None:
        self.stop_renewing()
        for conn in self._sub_conns:
            conn.close()
