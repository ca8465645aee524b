#!/usr/bin/env python3
"""Tiered compaction keeps the mean and the fluctuation range.

Writes a day of noisy one-second samples, compacts through two tiers and
shows that the count-weighted mean is conserved to float precision while
min/max stay exact; then queries the mixed raw+binned range.
"""
import random
from math import fsum

from gridmon.metrics import MetricValue
from gridmon.store import RetentionPolicy, TimeSeriesStore
from gridmon.subscription import Predicate

policy = RetentionPolicy(tiers=(
    (0, 0),                 # raw
    (3_600_000, 60_000),    # older than 1h -> 60s bins
    (7_200_000, 600_000),   # older than 2h -> 600s bins
))
store = TimeSeriesStore(policy=policy)

rng = random.Random(4)
t0 = 1_000
values = [MetricValue("demo", "compute", "n1", "Load5",
                      t0 + i * 1_000, rng.gauss(1.0, 0.3))
          for i in range(4 * 3_600)]  # 4 hours of 1s samples
store.insert(values)
print(f"inserted {len(values)} raw points, records stored: {store.record_count()}")

now = t0 + 4 * 3_600_000
made = store.compact(now)
print(f"compact(now) created {made} bins, records stored: {store.record_count()}")
print(f"compact again (idempotent): {store.compact(now)} new bins")

raw_mean = fsum(v.value for v in values) / len(values)
bins = store.query_bins(Predicate(param_re="Load5"), 0, now, 600_000)
total = sum(b.count for _, b in bins)
weighted = fsum(b.mean * b.count for _, b in bins) / total
print(f"\nraw mean      {raw_mean:.12f}")
print(f"weighted mean {weighted:.12f}  (over {len(bins)} bins, {total} samples)")
print(f"raw extrema   {min(v.value for v in values):.4f}"
      f" .. {max(v.value for v in values):.4f}")
print(f"bin extrema   {min(b.vmin for _, b in bins):.4f}"
      f" .. {max(b.vmax for _, b in bins):.4f}")

print("\n-- one chart-ready row per 10 minutes, mean with min/max envelope --")
for key, b in bins[:6]:
    bar = "#" * int(max(b.mean * 20, 1))
    print(f"   t={b.t_start:>12} mean={b.mean:.3f} [{b.vmin:+.2f},{b.vmax:+.2f}] {bar}")
