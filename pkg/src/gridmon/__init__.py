"""Distributed monitoring services at desk scale.

Cooperating pieces: a lease-based registry with discovery events, a
worker-pooled collection engine, a compacting time-series store,
predicate subscriptions with deployable filters, UDP-style link probing,
an MST overlay optimizer with momentum hysteresis, supervisor agents,
an aggregating HTTP repository, and a deterministic scenario simulator
gluing them together.
"""

from .clock import Clock, ManualClock
from .metrics import MetricValue
from .store import CompactionBin, RetentionPolicy, TimeSeriesStore
from .subscription import FilterSpec, Predicate, SubscriptionHub
from .probe import LinkStats, ProbeAgent, ProbeConfig, ProbePacket
from .overlay import (Graph, MstConfig, OverlayOptimizer, SpanningTree,
                      boruvka_mst, kruskal_mst)
from .registry import Lease, RegistryCore, ServiceDescriptor
from .collector import CollectionEngine
from .supervisor import Supervisor, WatchSpec

__version__ = "0.1.0"

__all__ = [
    "Clock", "ManualClock", "MetricValue", "CompactionBin", "RetentionPolicy",
    "TimeSeriesStore", "FilterSpec", "Predicate", "SubscriptionHub",
    "LinkStats", "ProbeAgent", "ProbeConfig", "ProbePacket", "Graph",
    "MstConfig", "OverlayOptimizer", "SpanningTree", "boruvka_mst",
    "kruskal_mst", "Lease", "RegistryCore", "ServiceDescriptor",
    "CollectionEngine", "Supervisor", "WatchSpec",
]
