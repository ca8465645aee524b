"""Predicate matching over the live metric flow, per-client delivery lanes
and deployable filter agents.

Matching runs on the publisher side; each subscriber gets a bounded queue
drained by its own writer thread, so one stalled or dead client never
slows the others. A lane that overflows its high-water mark is dropped and
the client finds out when it reconnects.

Filters are declarative aggregators (predicate + aggregate + period) that
must carry a valid keyed-hash signature before they are activated; each
period they emit one synthetic metric value back into the flow.
"""
from __future__ import annotations

import itertools
import logging
import queue
import re
import threading
from dataclasses import dataclass, field
from math import fsum
from typing import Callable, Optional

from .clock import Clock
from .metrics import MetricValue, SeriesKey
from .signing import canonical_json, verify
from .store import TimeSeriesStore

log = logging.getLogger(__name__)

AGGREGATES = ("SUM", "MEAN", "MIN", "MAX", "COUNT", "COUNT_WHERE")

_PREDICATE_FIELDS = ("farm_re", "cluster_re", "node_re", "param_re",
                     "t1", "t2", "vmin", "vmax")


class PredicateError(Exception):
    pass


@dataclass(frozen=True)
class Predicate:
    """Anchored-regex selector over metric addresses.

    All four patterns must match their entire field; optional vmin/vmax
    bound the value (inclusive) and t1/t2 bound time for history queries
    only. Missing patterns default to match-all.
    """

    farm_re: str = ".*"
    cluster_re: str = ".*"
    node_re: str = ".*"
    param_re: str = ".*"
    t1: Optional[int] = None
    t2: Optional[int] = None
    vmin: Optional[float] = None
    vmax: Optional[float] = None
    _compiled: tuple = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        try:
            compiled = tuple(re.compile(p) for p in
                             (self.farm_re, self.cluster_re, self.node_re, self.param_re))
        except re.error as e:
            raise PredicateError(f"invalid pattern: {e}") from e
        if self.t1 is not None and self.t2 is not None and self.t1 > self.t2:
            raise PredicateError("t1 must be <= t2")
        if self.vmin is not None and self.vmax is not None and self.vmin > self.vmax:
            raise PredicateError("vmin must be <= vmax")
        object.__setattr__(self, "_compiled", compiled)

    def matches_key(self, key: SeriesKey) -> bool:
        return all(c.fullmatch(part) for c, part in zip(self._compiled, key))

    def matches(self, v: MetricValue, live: bool = True) -> bool:
        """Full predicate test; time bounds only apply to history lookups."""
        if not self.matches_key(v.key()):
            return False
        if self.vmin is not None and v.value < self.vmin:
            return False
        if self.vmax is not None and v.value > self.vmax:
            return False
        if not live:
            if self.t1 is not None and v.time < self.t1:
                return False
            if self.t2 is not None and v.time > self.t2:
                return False
        return True

    def to_wire(self) -> dict:
        d = {}
        for name in _PREDICATE_FIELDS:
            val = getattr(self, name)
            if val is not None:
                d[name] = val
        return d

    @classmethod
    def from_wire(cls, d: dict) -> "Predicate":
        kwargs = {}
        for name in _PREDICATE_FIELDS:
            if d.get(name) is not None:
                kwargs[name] = d[name]
        return cls(**kwargs)


def predicate_match(p: Predicate, v: MetricValue) -> bool:
    return p.matches(v, live=True)


class _Lane:
    """One client's delivery queue and writer thread.

    The queue holds matched batches (lists), one put per publish, so the
    publisher's cost per extra subscriber is a single enqueue no matter
    the batch size. The high-water mark counts queued values.
    """

    def __init__(self, sub_id: int, predicate: Predicate,
                 send: Callable[[list[MetricValue]], None], hwm: int):
        self.sub_id = sub_id
        self.predicate = predicate
        self.send = send
        self.hwm = hwm
        self.queue: queue.Queue = queue.Queue()
        self.queued_values = 0
        self.count_lock = threading.Lock()
        self.delivered = 0
        self.dropped = False
        self.send_failed = False
        self.thread: Optional[threading.Thread] = None

    def offer(self, batch: list[MetricValue]) -> bool:
        """Enqueue one matched batch; False when past the high-water mark."""
        with self.count_lock:
            if self.queued_values + len(batch) > self.hwm:
                return False
            self.queued_values += len(batch)
        self.queue.put_nowait(batch)
        return True

    def run(self, on_exit: Callable[["_Lane"], None]) -> None:
        try:
            stop = False
            while not stop and not self.dropped:
                item = self.queue.get()
                if item is None:
                    break
                batch = list(item)
                # drain whatever else is ready so one send covers it
                while True:
                    try:
                        nxt = self.queue.get_nowait()
                    except queue.Empty:
                        break
                    if nxt is None:
                        stop = True
                        break
                    batch.extend(nxt)
                with self.count_lock:
                    self.queued_values -= len(batch)
                if self.dropped:
                    break  # stale backlog of a dead client: do not deliver
                try:
                    self.send(batch)
                    self.delivered += len(batch)
                except Exception:
                    # communication error: clean this subscription up,
                    # the other clients are unaffected
                    self.send_failed = True
                    break
        finally:
            on_exit(self)


class SubscriptionHub:
    """Fan-out from the collector's result stream to subscribed clients."""

    def __init__(self, default_hwm: int = 10_000):
        self.default_hwm = default_hwm
        self._lock = threading.Lock()
        self._lanes: dict[int, _Lane] = {}
        self._ids = itertools.count(1)
        self._on_drop: dict[int, Callable[[int, str], None]] = {}
        self.published = 0
        self.dropped_values = 0
        self.dropped_subscriptions = 0
        self.delivered: dict[int, int] = {}  # survives lane teardown

    def subscribe(self, predicate: Predicate,
                  send: Callable[[list[MetricValue]], None],
                  hwm: Optional[int] = None,
                  on_drop: Optional[Callable[[int, str], None]] = None) -> int:
        """Register a client lane; duplicate predicates get independent lanes."""
        lane = _Lane(next(self._ids), predicate, send, hwm or self.default_hwm)
        with self._lock:
            self._lanes[lane.sub_id] = lane
            if on_drop:
                self._on_drop[lane.sub_id] = on_drop
        lane.thread = threading.Thread(target=lane.run, args=(self._lane_exit,),
                                       name=f"sub-lane-{lane.sub_id}", daemon=True)
        lane.thread.start()
        return lane.sub_id

    def unsubscribe(self, sub_id: int) -> None:
        with self._lock:
            lane = self._lanes.pop(sub_id, None)
            self._on_drop.pop(sub_id, None)
        if lane:
            lane.dropped = True
            lane.queue.put_nowait(None)

    def _lane_exit(self, lane: _Lane) -> None:
        with self._lock:
            self._lanes.pop(lane.sub_id, None)
            self.delivered[lane.sub_id] = lane.delivered
        if lane.send_failed and not lane.dropped:
            lane.dropped = True
            self.dropped_subscriptions += 1

    def publish(self, values: list[MetricValue]) -> None:
        """Match values against every lane; never blocks on a slow client.

        Matching runs once per distinct predicate and the matched batch is
        shared across lanes, so extra subscribers cost one enqueue each.
        """
        with self._lock:
            lanes = list(self._lanes.values())
        self.published += len(values)
        matched_by_predicate: dict[Predicate, list[MetricValue]] = {}
        overflowed: list[_Lane] = []
        for lane in lanes:
            if lane.dropped:
                continue
            matched = matched_by_predicate.get(lane.predicate)
            if matched is None:
                matched = [v for v in values if lane.predicate.matches(v, live=True)]
                matched_by_predicate[lane.predicate] = matched
            if not matched:
                continue
            if not lane.offer(matched):
                lane.dropped = True
                overflowed.append(lane)
        for lane in overflowed:
            self._drop(lane, "overflow")

    def _drop(self, lane: _Lane, reason: str) -> None:
        """O(1): never drains the backlog on the publish path."""
        lane.dropped = True
        self.dropped_subscriptions += 1
        self.dropped_values += lane.queued_values
        with self._lock:
            self._lanes.pop(lane.sub_id, None)
            cb = self._on_drop.pop(lane.sub_id, None)
        lane.queue.put_nowait(None)  # wake a writer blocked on get
        if cb:
            try:
                cb(lane.sub_id, reason)
            except Exception:
                log.debug("on_drop callback failed for sub %d", lane.sub_id)

    def active_subscriptions(self) -> list[int]:
        with self._lock:
            return sorted(self._lanes)

    def delivered_count(self, sub_id: int) -> int:
        with self._lock:
            lane = self._lanes.get(sub_id)
            if lane is not None:
                return lane.delivered
            return self.delivered.get(sub_id, 0)


def history(store: TimeSeriesStore, predicate: Predicate,
            width: Optional[int] = None):
    """Historical query: delegates to the store, then applies value bounds.

    Raw results are filtered per value; binned results apply vmin/vmax to
    the bin mean.
    """
    if predicate.t1 is None or predicate.t2 is None:
        raise PredicateError("history requires both t1 and t2")
    if width:
        bins = store.query_bins(predicate, predicate.t1, predicate.t2, width)
        return [(k, b) for k, b in bins
                if (predicate.vmin is None or b.mean >= predicate.vmin)
                and (predicate.vmax is None or b.mean <= predicate.vmax)]
    rows = store.query_raw(predicate, predicate.t1, predicate.t2)
    return [v for v in rows if predicate.matches(v, live=False)]


@dataclass(frozen=True)
class FilterSpec:
    """A deployable periodic aggregator over a predicate."""

    filter_id: str
    predicate: Predicate
    aggregate: str
    period_ms: int
    output_param: str
    where_vmin: Optional[float] = None  # COUNT_WHERE bounds
    where_vmax: Optional[float] = None

    def __post_init__(self):
        if self.aggregate not in AGGREGATES:
            raise PredicateError(f"unknown aggregate {self.aggregate!r}")
        if self.period_ms <= 0:
            raise PredicateError("period_ms must be positive")

    def signable(self) -> bytes:
        return canonical_json({
            "filter_id": self.filter_id,
            "predicate": self.predicate.to_wire(),
            "aggregate": self.aggregate,
            "period_ms": self.period_ms,
            "output_param": self.output_param,
            "where_vmin": self.where_vmin,
            "where_vmax": self.where_vmax,
        })

    def to_wire(self) -> dict:
        return {
            "filter_id": self.filter_id,
            "predicate": self.predicate.to_wire(),
            "aggregate": self.aggregate,
            "period_ms": self.period_ms,
            "output_param": self.output_param,
            "where_vmin": self.where_vmin,
            "where_vmax": self.where_vmax,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "FilterSpec":
        return cls(
            filter_id=str(d["filter_id"]),
            predicate=Predicate.from_wire(d.get("predicate", {})),
            aggregate=str(d["aggregate"]),
            period_ms=int(d["period_ms"]),
            output_param=str(d["output_param"]),
            where_vmin=d.get("where_vmin"),
            where_vmax=d.get("where_vmax"),
        )


class SignatureError(Exception):
    pass


class _ActiveFilter:
    __slots__ = ("spec", "window", "next_due", "lock")

    def __init__(self, spec: FilterSpec, first_due: int):
        self.spec = spec
        self.window: list[float] = []
        self.next_due = first_due
        self.lock = threading.Lock()

    def absorb(self, values: list[MetricValue]) -> None:
        with self.lock:
            for v in values:
                if self.spec.predicate.matches(v, live=True):
                    self.window.append(v.value)

    def aggregate(self) -> Optional[float]:
        spec = self.spec
        with self.lock:
            window, self.window = self.window, []
        if spec.aggregate == "COUNT":
            return float(len(window))
        if spec.aggregate == "COUNT_WHERE":
            lo, hi = spec.where_vmin, spec.where_vmax
            return float(sum(1 for x in window
                             if (lo is None or x >= lo) and (hi is None or x <= hi)))
        if not window:
            return None  # SUM/MEAN/MIN/MAX emit nothing on an empty window
        if spec.aggregate == "SUM":
            return fsum(window)
        if spec.aggregate == "MEAN":
            return fsum(window) / len(window)
        if spec.aggregate == "MIN":
            return min(window)
        return max(window)


class FilterEngine:
    """Hosts signed filter agents against the local metric flow.

    Deployed filters see every published value; on each period they emit
    one synthetic value on (local_farm, "_filters", filter_id, output_param)
    which is handed back to the publish path and the store.
    """

    def __init__(self, trust_key: str, local_farm: str, clock: Clock,
                 emit: Callable[[MetricValue], None]):
        self.trust_key = trust_key
        self.local_farm = local_farm
        self.clock = clock
        self.emit = emit
        self._lock = threading.Lock()
        self._filters: dict[str, _ActiveFilter] = {}
        self.audit: list[dict] = []

    def deploy(self, spec: FilterSpec, signature: str) -> str:
        if not verify(self.trust_key, spec.signable(), signature):
            self.audit.append({"event": "filter_rejected", "filter_id": spec.filter_id,
                               "reason": "bad signature", "at": self.clock.now_ms()})
            raise SignatureError(f"filter {spec.filter_id}: signature does not verify")
        with self._lock:
            self._filters[spec.filter_id] = _ActiveFilter(
                spec, self.clock.now_ms() + spec.period_ms)
        self.audit.append({"event": "filter_deployed", "filter_id": spec.filter_id,
                           "at": self.clock.now_ms()})
        return spec.filter_id

    def remove(self, filter_id: str) -> bool:
        with self._lock:
            return self._filters.pop(filter_id, None) is not None

    def observe(self, values: list[MetricValue]) -> None:
        """Feed published values into every active filter's window."""
        with self._lock:
            filters = list(self._filters.values())
        for f in filters:
            f.absorb(values)

    def tick(self, filter_id: str, now: int) -> Optional[MetricValue]:
        """Aggregate one filter's window and emit its synthetic value."""
        with self._lock:
            f = self._filters.get(filter_id)
        if f is None:
            return None
        agg = f.aggregate()
        f.next_due += f.spec.period_ms
        if agg is None:
            return None
        out = MetricValue(farm=self.local_farm, cluster="_filters",
                          node=f.spec.filter_id, param=f.spec.output_param,
                          time=now, value=agg)
        self.emit(out)
        return out

    def tick_due(self, now: int) -> list[MetricValue]:
        with self._lock:
            due = [fid for fid, f in self._filters.items() if f.next_due <= now]
        out = []
        for fid in sorted(due):
            v = self.tick(fid, now)
            if v is not None:
                out.append(v)
        return out

    def active(self) -> list[str]:
        with self._lock:
            return sorted(self._filters)
