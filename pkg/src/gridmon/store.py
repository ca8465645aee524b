"""Per-service time-series storage with tiered compaction.

Raw values live in memory (backed by an append log when a path is given)
until they cross a retention tier's age threshold; they are then replaced
by aligned interval bins keeping mean, min, max and count, so the
fluctuation range of every parameter survives compaction. Coarser tiers
merge finer bins the same way.

Single writer, concurrent readers; compaction rewrites segment files and
swaps them atomically via the manifest.
"""
from __future__ import annotations

import json
import math
import os
import struct
import threading
from dataclasses import dataclass
from math import fsum
from typing import Iterable, Optional, TYPE_CHECKING

from .metrics import MetricValue, SeriesKey

if TYPE_CHECKING:  # pragma: no cover
    from .subscription import Predicate

_SEG_MAGIC = b"GMST"
_SEG_VERSION = 1
_RAW_RECORD = struct.Struct("<Iqd")       # key_id, time, value
_BIN_RECORD = struct.Struct("<Iqqdddq")   # key_id, t_start, t_end, mean, min, max, count
_SEG_HEADER = struct.Struct("<4sHBq")     # magic, version, kind, width


class StoreError(Exception):
    pass


class BadWidth(StoreError):
    """Requested bin width incompatible with what is stored."""

    def __init__(self, width: int, valid_base: int):
        super().__init__(
            f"width {width} not a multiple of stored width {valid_base}; "
            f"valid widths: k*{valid_base} for k >= 1")
        self.width = width
        self.valid_base = valid_base


@dataclass(frozen=True, slots=True)
class CompactionBin:
    t_start: int
    t_end: int
    mean: float
    vmin: float
    vmax: float
    count: int

    def to_wire(self) -> dict:
        return {"t_start": self.t_start, "t_end": self.t_end, "mean": self.mean,
                "min": self.vmin, "max": self.vmax, "count": self.count}


@dataclass(frozen=True)
class RetentionPolicy:
    """Ordered tiers of (age_ms, bin_width_ms); the raw tier (0, 0) comes first.

    Data older than tier i's age is held at tier i's width. Widths must
    nest: each width is an integer multiple of the previous nonzero one.
    """

    tiers: tuple[tuple[int, int], ...] = (
        (0, 0),
        (2 * 3600_000, 60_000),            # raw for 2 h, then 60 s bins
        (2 * 24 * 3600_000, 600_000),      # 60 s bins for 2 d, then 600 s bins
    )

    def __post_init__(self):
        tiers = tuple((int(a), int(w)) for a, w in self.tiers)
        object.__setattr__(self, "tiers", tiers)
        if not tiers or tiers[0] != (0, 0):
            raise StoreError("first retention tier must be the raw tier (0, 0)")
        ages = [a for a, _ in tiers]
        widths = [w for _, w in tiers]
        if any(b <= a for a, b in zip(ages, ages[1:])):
            raise StoreError("tier ages must be strictly increasing")
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise StoreError("tier widths must be strictly increasing")
        prev = 0
        for w in widths[1:]:
            if prev and w % prev != 0:
                raise StoreError("each width must be a multiple of the previous one")
            prev = w

    def steps(self) -> list[tuple[int, int, int]]:
        """(source_width, target_width, target_age) per compaction step."""
        out = []
        for (_, src_w), (age, dst_w) in zip(self.tiers, self.tiers[1:]):
            out.append((src_w, dst_w, age))
        return out


class _Series:
    __slots__ = ("raw", "dirty", "bins")

    def __init__(self):
        self.raw: list[tuple[int, float]] = []
        self.dirty = False
        self.bins: dict[int, list[CompactionBin]] = {}

    def normalize(self) -> None:
        """Sort by time and resolve duplicate timestamps last-write-wins."""
        if not self.dirty:
            return
        dedup: dict[int, float] = {}
        for t, v in self.raw:
            dedup[t] = v
        self.raw = sorted(dedup.items())
        self.dirty = False


def _bin_of(values: Iterable[tuple[int, float]], t_start: int, t_end: int) -> CompactionBin:
    vs = [v for _, v in values]
    return CompactionBin(t_start=t_start, t_end=t_end, mean=fsum(vs) / len(vs),
                         vmin=min(vs), vmax=max(vs), count=len(vs))


def merge_bins(parts: list[CompactionBin], t_start: int, t_end: int) -> CompactionBin:
    """Count-weighted merge; min/max are extrema, counts add."""
    total = sum(p.count for p in parts)
    mean = fsum(p.mean * p.count for p in parts) / total
    return CompactionBin(t_start=t_start, t_end=t_end, mean=mean,
                         vmin=min(p.vmin for p in parts),
                         vmax=max(p.vmax for p in parts), count=total)


class TimeSeriesStore:
    def __init__(self, path: Optional[str] = None,
                 policy: Optional[RetentionPolicy] = None,
                 fsync: bool = False):
        self.policy = policy or RetentionPolicy()
        self.path = path
        self._fsync = fsync
        self._lock = threading.RLock()
        self._series: dict[SeriesKey, _Series] = {}
        self.accepted = 0
        self.rejected = 0
        # disk state
        self._key_ids: dict[SeriesKey, int] = {}
        self._next_key_id = 0
        self._segments: list[dict] = []
        self._next_segment = 0
        self._raw_log = None
        self._pending: list[tuple[SeriesKey, int, float]] = []
        if path:
            os.makedirs(path, exist_ok=True)
            if os.path.exists(os.path.join(path, "manifest.json")):
                self._load()

    # ------------------------------------------------------------- ingest

    def insert(self, values: Iterable[MetricValue]) -> int:
        """Store values; returns how many were accepted.

        Non-finite values and non-positive timestamps are skipped and
        counted, not fatal. Duplicate (key, time) resolves last write wins.
        """
        accepted = 0
        with self._lock:
            for v in values:
                if not v.is_valid():
                    self.rejected += 1
                    continue
                s = self._series.get(v.key())
                if s is None:
                    s = self._series[v.key()] = _Series()
                if s.raw and not s.dirty and v.time <= s.raw[-1][0]:
                    s.dirty = True
                s.raw.append((v.time, v.value))
                accepted += 1
                if self.path:
                    self._pending.append((v.key(), v.time, v.value))
            self.accepted += accepted
        return accepted

    # ------------------------------------------------------------- queries

    def keys(self) -> list[SeriesKey]:
        with self._lock:
            return sorted(self._series.keys())

    def match_keys(self, predicate: "Predicate") -> list[SeriesKey]:
        with self._lock:
            return sorted(k for k in self._series if predicate.matches_key(k))

    def query_raw(self, predicate: "Predicate", t1: int, t2: int) -> list[MetricValue]:
        """Raw points with t1 <= time <= t2, ordered by (key, time).

        Ranges that were compacted away return nothing here; use
        query_bins for those.
        """
        if t1 > t2:
            raise StoreError("t1 must be <= t2")
        out: list[MetricValue] = []
        with self._lock:
            for key in self.match_keys(predicate):
                s = self._series[key]
                s.normalize()
                for t, v in s.raw:
                    if t1 <= t <= t2:
                        out.append(MetricValue(*key, time=t, value=v))
        return out

    def query_bins(self, predicate: "Predicate", t1: int, t2: int,
                   width: int) -> list[tuple[SeriesKey, CompactionBin]]:
        """Re-aggregate raw values and stored bins to the requested width.

        Output bins are aligned (t_start multiple of width) and cover every
        aligned window intersecting [t1, t2] that holds data. Raw values
        count as single-sample bins. The width must be a multiple of every
        stored bin width in range, otherwise BadWidth lists the valid ones.
        """
        if t1 > t2:
            raise StoreError("t1 must be <= t2")
        if width <= 0:
            raise StoreError("width must be positive")
        out: list[tuple[SeriesKey, CompactionBin]] = []
        with self._lock:
            for key in self.match_keys(predicate):
                s = self._series[key]
                s.normalize()
                windows: dict[int, list[CompactionBin]] = {}
                for t, v in s.raw:
                    if t1 <= t <= t2:
                        w0 = (t // width) * width
                        windows.setdefault(w0, []).append(
                            CompactionBin(t, t + 1, v, v, v, 1))
                for stored_w, bins in sorted(s.bins.items()):
                    for b in bins:
                        if b.t_end <= t1 or b.t_start > t2:
                            continue
                        if width % stored_w != 0:
                            raise BadWidth(width, self._coarsest_in_range(s, t1, t2))
                        w0 = (b.t_start // width) * width
                        windows.setdefault(w0, []).append(b)
                for w0 in sorted(windows):
                    out.append((key, merge_bins(windows[w0], w0, w0 + width)))
        return out

    def _coarsest_in_range(self, s: _Series, t1: int, t2: int) -> int:
        widths = [w for w, bins in s.bins.items()
                  if any(b.t_end > t1 and b.t_start <= t2 for b in bins)]
        return max(widths) if widths else 1

    # ---------------------------------------------------------- compaction

    def compact(self, now: int) -> int:
        """Run every tier transition; returns the number of bins written.

        A value (or finer bin) moves once its own timestamp falls past the
        tier age; bins are aligned t_start = 0 mod width and collisions
        from late backfill merge count-weighted.
        """
        written = 0
        with self._lock:
            for src_w, dst_w, age in self.policy.steps():
                cutoff = now - age
                for key, s in self._series.items():
                    written += self._compact_step(s, src_w, dst_w, cutoff)
            if written and self.path:
                self._rewrite_segments()
        return written

    def _compact_step(self, s: _Series, src_w: int, dst_w: int, cutoff: int) -> int:
        groups: dict[int, list[CompactionBin]] = {}
        if src_w == 0:
            s.normalize()
            move = [(t, v) for t, v in s.raw if t < cutoff]
            if not move:
                return 0
            s.raw = [(t, v) for t, v in s.raw if t >= cutoff]
            for t, v in move:
                w0 = (t // dst_w) * dst_w
                groups.setdefault(w0, []).append(CompactionBin(t, t + 1, v, v, v, 1))
        else:
            src = s.bins.get(src_w)
            if not src:
                return 0
            move = [b for b in src if b.t_end <= cutoff]
            if not move:
                return 0
            s.bins[src_w] = [b for b in src if b.t_end > cutoff]
            for b in move:
                w0 = (b.t_start // dst_w) * dst_w
                groups.setdefault(w0, []).append(b)
        dst = s.bins.setdefault(dst_w, [])
        existing = {b.t_start: i for i, b in enumerate(dst)}
        for w0, parts in groups.items():
            if w0 in existing:
                parts.append(dst[existing[w0]])
                dst[existing[w0]] = merge_bins(parts, w0, w0 + dst_w)
            else:
                dst.append(merge_bins(parts, w0, w0 + dst_w))
        dst.sort(key=lambda b: b.t_start)
        return len(groups)

    def record_count(self) -> int:
        """Total stored records (raw points + bins); non-increasing under compaction."""
        with self._lock:
            n = 0
            for s in self._series.values():
                s.normalize()
                n += len(s.raw) + sum(len(b) for b in s.bins.values())
            return n

    # ------------------------------------------------------------- disk

    def flush(self) -> None:
        """Make buffered inserts durable (no-op for memory-only stores)."""
        with self._lock:
            if not self.path or not self._pending:
                return
            if self._raw_log is None:
                self._open_raw_segment()
            keys_before = self._next_key_id
            for key, t, v in self._pending:
                self._raw_log.write(_RAW_RECORD.pack(self._key_id(key), t, v))
            self._pending.clear()
            self._raw_log.flush()
            if self._fsync:
                os.fsync(self._raw_log.fileno())
            if self._next_key_id != keys_before:
                self._write_manifest()  # record the new key ids

    def close(self) -> None:
        with self._lock:
            self.flush()
            if self._raw_log:
                self._raw_log.close()
                self._raw_log = None

    def _key_id(self, key: SeriesKey) -> int:
        kid = self._key_ids.get(key)
        if kid is None:
            kid = self._key_ids[key] = self._next_key_id
            self._next_key_id += 1
        return kid

    def _segment_name(self, kind: str) -> str:
        name = f"seg-{self._next_segment:06d}.{kind}"
        self._next_segment += 1
        return name

    def _open_raw_segment(self) -> None:
        name = self._segment_name("raw")
        f = open(os.path.join(self.path, name), "ab")
        f.write(_SEG_HEADER.pack(_SEG_MAGIC, _SEG_VERSION, 0, 0))
        self._raw_log = f
        self._segments.append({"file": name, "kind": "raw", "width": 0})
        self._write_manifest()

    def _write_manifest(self) -> None:
        manifest = {
            "version": _SEG_VERSION,
            "keys": {str(kid): list(key) for key, kid in self._key_ids.items()},
            "segments": self._segments,
            "next_segment": self._next_segment,
        }
        tmp = os.path.join(self.path, "manifest.json.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(manifest, f)
            f.flush()
            if self._fsync:
                os.fsync(f.fileno())
        os.replace(tmp, os.path.join(self.path, "manifest.json"))

    def _rewrite_segments(self) -> None:
        """Snapshot the whole store into fresh segments and swap the manifest."""
        self._pending.clear()  # the snapshot below covers buffered inserts
        if self._raw_log:
            self._raw_log.close()
            self._raw_log = None
        old_files = [seg["file"] for seg in self._segments]
        self._segments = []
        raw_name = self._segment_name("raw")
        with open(os.path.join(self.path, raw_name), "wb") as f:
            f.write(_SEG_HEADER.pack(_SEG_MAGIC, _SEG_VERSION, 0, 0))
            for key, s in self._series.items():
                s.normalize()
                kid = self._key_id(key)
                for t, v in s.raw:
                    f.write(_RAW_RECORD.pack(kid, t, v))
        self._segments.append({"file": raw_name, "kind": "raw", "width": 0})
        widths = sorted({w for s in self._series.values() for w in s.bins})
        for w in widths:
            name = self._segment_name("bins")
            with open(os.path.join(self.path, name), "wb") as f:
                f.write(_SEG_HEADER.pack(_SEG_MAGIC, _SEG_VERSION, 1, w))
                for key, s in self._series.items():
                    kid = self._key_id(key)
                    for b in s.bins.get(w, ()):
                        f.write(_BIN_RECORD.pack(kid, b.t_start, b.t_end,
                                                 b.mean, b.vmin, b.vmax, b.count))
            self._segments.append({"file": name, "kind": "bins", "width": w})
        self._write_manifest()
        self._raw_log = open(os.path.join(self.path, raw_name), "ab")
        for name in old_files:
            try:
                os.remove(os.path.join(self.path, name))
            except OSError:
                pass

    def _load(self) -> None:
        with open(os.path.join(self.path, "manifest.json"), encoding="utf-8") as f:
            manifest = json.load(f)
        keys = {int(kid): tuple(key) for kid, key in manifest["keys"].items()}
        self._key_ids = {key: kid for kid, key in keys.items()}
        self._next_key_id = max(keys, default=-1) + 1
        self._next_segment = manifest.get("next_segment", 0)
        self._segments = manifest["segments"]
        for seg in self._segments:
            path = os.path.join(self.path, seg["file"])
            if not os.path.exists(path):
                continue
            with open(path, "rb") as f:
                header = f.read(_SEG_HEADER.size)
                if len(header) < _SEG_HEADER.size:
                    continue
                magic, version, kind, width = _SEG_HEADER.unpack(header)
                if magic != _SEG_MAGIC or version != _SEG_VERSION:
                    raise StoreError(f"bad segment header in {seg['file']}")
                data = f.read()
            if kind == 0:
                for (kid, t, v) in _RAW_RECORD.iter_unpack(data):
                    key = keys.get(kid)
                    if key is None:
                        continue
                    s = self._series.setdefault(key, _Series())
                    if s.raw and not s.dirty and t <= s.raw[-1][0]:
                        s.dirty = True
                    s.raw.append((t, v))
            else:
                for (kid, t0, t1, mean, vmin, vmax, count) in _BIN_RECORD.iter_unpack(data):
                    key = keys.get(kid)
                    if key is None:
                        continue
                    s = self._series.setdefault(key, _Series())
                    s.bins.setdefault(width, []).append(
                        CompactionBin(t0, t1, mean, vmin, vmax, count))
        for s in self._series.values():
            for w in s.bins:
                s.bins[w].sort(key=lambda b: b.t_start)

    # ------------------------------------------------------------- export

    def export_raw_csv(self, out) -> int:
        """`key,time,value` lines; returns rows written."""
        n = 0
        with self._lock:
            for key in self.keys():
                s = self._series[key]
                s.normalize()
                kstr = "/".join(key)
                for t, v in s.raw:
                    out.write(f"{kstr},{t},{v!r}\n")
                    n += 1
        return n

    def export_bins_csv(self, out) -> int:
        """`key,t_start,t_end,mean,min,max,count` lines; returns rows written."""
        n = 0
        with self._lock:
            for key in self.keys():
                s = self._series[key]
                kstr = "/".join(key)
                for w in sorted(s.bins):
                    for b in s.bins[w]:
                        out.write(f"{kstr},{b.t_start},{b.t_end},{b.mean!r},"
                                  f"{b.vmin!r},{b.vmax!r},{b.count}\n")
                        n += 1
        return n
