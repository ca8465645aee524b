"""The metric value record shared by every module.

A measurement is addressed by the four-part key farm/cluster/node/param;
that tuple is the canonical series key in the store, in predicates and on
the wire.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

SeriesKey = tuple[str, str, str, str]


@dataclass(frozen=True, slots=True)
class MetricValue:
    farm: str
    cluster: str
    node: str
    param: str
    time: int  # ms epoch
    value: float

    def key(self) -> SeriesKey:
        return (self.farm, self.cluster, self.node, self.param)

    def key_str(self) -> str:
        return "/".join(self.key())

    def is_valid(self) -> bool:
        return self.time > 0 and math.isfinite(self.value)

    def to_wire(self) -> dict:
        return {
            "farm": self.farm,
            "cluster": self.cluster,
            "node": self.node,
            "param": self.param,
            "time": self.time,
            "value": self.value,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "MetricValue":
        return cls(
            farm=str(d["farm"]),
            cluster=str(d["cluster"]),
            node=str(d["node"]),
            param=str(d["param"]),
            time=int(d["time"]),
            value=float(d["value"]),
        )


def key_from_str(s: str) -> SeriesKey:
    parts = s.split("/")
    if len(parts) != 4:
        raise ValueError(f"series key must have 4 parts: {s!r}")
    return (parts[0], parts[1], parts[2], parts[3])
