import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridmon.metrics import MetricValue
from gridmon.store import (BadWidth, CompactionBin, RetentionPolicy, StoreError,
                           TimeSeriesStore, merge_bins)
from gridmon.subscription import Predicate

from oracles import weighted_mean


def mv(t, v, farm="F1", cluster="c", node="n1", param="Load5"):
    return MetricValue(farm, cluster, node, param, t, float(v))


def small_policy():
    # raw for 10 s, 1 s bins for 100 s, then 10 s bins
    return RetentionPolicy(tiers=((0, 0), (10_000, 1_000), (100_000, 10_000)))


class TestInsertAndQuery:
    def test_round_trip_in_time_order(self):
        st_ = TimeSeriesStore()
        assert st_.insert([mv(3000, 3.0), mv(1000, 1.0), mv(2000, 2.0)]) == 3
        out = st_.query_raw(Predicate(farm_re="F1"), 0, 5000)
        assert [(v.time, v.value) for v in out] == [(1000, 1.0), (2000, 2.0), (3000, 3.0)]

    def test_nan_and_inf_skipped_not_fatal(self):
        st_ = TimeSeriesStore()
        n = st_.insert([mv(1000, 1.0), mv(2000, float("nan")),
                        mv(3000, float("inf")), mv(4000, 4.0)])
        assert n == 2
        assert st_.rejected == 2

    def test_duplicate_key_time_last_write_wins(self):
        st_ = TimeSeriesStore()
        st_.insert([mv(1000, 1.0)])
        st_.insert([mv(1000, 9.0)])
        out = st_.query_raw(Predicate(), 0, 5000)
        assert [(v.time, v.value) for v in out] == [(1000, 9.0)]

    def test_inclusive_bounds_point_query(self):
        st_ = TimeSeriesStore()
        st_.insert([mv(1000, 1.0)])
        assert len(st_.query_raw(Predicate(), 1000, 1000)) == 1

    def test_pattern_interleaves_series_by_key_order(self):
        st_ = TimeSeriesStore()
        st_.insert([mv(1000, 5.0, param="Load5"), mv(1000, 1.0, param="Load1")])
        out = st_.query_raw(Predicate(param_re="Load.*"), 0, 5000)
        assert [v.param for v in out] == ["Load1", "Load5"]

    def test_t1_after_t2_rejected(self):
        st_ = TimeSeriesStore()
        with pytest.raises(StoreError):
            st_.query_raw(Predicate(), 10, 5)


class TestCompaction:
    def test_four_values_one_bin(self):
        st_ = TimeSeriesStore(policy=small_policy())
        st_.insert([mv(1000 + i * 200, v) for i, v in enumerate([1, 2, 3, 4])])
        st_.compact(now=20_000)
        bins = st_.query_bins(Predicate(), 0, 5000, 1000)
        assert len(bins) == 1
        _, b = bins[0]
        assert (b.mean, b.vmin, b.vmax, b.count) == (2.5, 1.0, 4.0, 4)

    def test_merge_weighted_mean_oracle(self):
        merged = merge_bins([CompactionBin(0, 1000, 2.0, 1.0, 3.0, 2),
                             CompactionBin(1000, 2000, 4.0, 2.0, 6.0, 6)],
                            0, 2000)
        assert merged.mean == weighted_mean([(2.0, 2), (4.0, 6)]) == 3.5
        assert merged.count == 8
        assert (merged.vmin, merged.vmax) == (1.0, 6.0)

    def test_constant_series_invariant(self):
        st_ = TimeSeriesStore(policy=small_policy())
        st_.insert([mv(1000 + i * 100, 7.0) for i in range(20)])
        st_.compact(now=50_000)
        for _, b in st_.query_bins(Predicate(), 0, 10_000, 1000):
            assert b.mean == b.vmin == b.vmax == 7.0

    def test_idempotent(self):
        st_ = TimeSeriesStore(policy=small_policy())
        st_.insert([mv(1000 + i * 100, i) for i in range(20)])
        assert st_.compact(now=60_000) > 0
        assert st_.compact(now=60_000) == 0

    def test_bin_alignment(self):
        st_ = TimeSeriesStore(policy=small_policy())
        st_.insert([mv(1500, 1.0), mv(2500, 2.0)])
        st_.compact(now=60_000)
        bins = st_.query_bins(Predicate(), 0, 10_000, 1000)
        assert [b.t_start for _, b in bins] == [1000, 2000]
        for _, b in bins:
            assert b.t_start % 1000 == 0

    def test_second_tier_merges_first(self):
        st_ = TimeSeriesStore(policy=small_policy())
        st_.insert([mv(1000 + i * 500, i) for i in range(8)])  # 1000..4500
        st_.compact(now=20_000)    # raw -> 1s bins
        n1 = st_.record_count()
        st_.compact(now=200_000)   # 1s bins -> 10s bins
        assert st_.record_count() <= n1
        bins = st_.query_bins(Predicate(), 0, 10_000, 10_000)
        assert len(bins) == 1
        _, b = bins[0]
        assert b.count == 8
        assert b.mean == pytest.approx(sum(range(8)) / 8)

    def test_monotone_storage(self):
        st_ = TimeSeriesStore(policy=small_policy())
        st_.insert([mv(1000 + i * 100, random.random()) for i in range(100)])
        before = st_.record_count()
        st_.compact(now=60_000)
        assert st_.record_count() <= before


class TestQueryBins:
    def test_sixty_raw_points_one_bin(self):
        st_ = TimeSeriesStore()
        vals = [mv(1000 + i * 900, float(i)) for i in range(60)]
        st_.insert(vals)
        bins = st_.query_bins(Predicate(), 0, 59_000, 60_000)
        assert len(bins) == 1
        _, b = bins[0]
        assert b.count == 60
        assert b.mean == pytest.approx(np.mean([v.value for v in vals]))

    def test_non_multiple_width_rejected_with_valid_widths(self):
        st_ = TimeSeriesStore(policy=small_policy())
        st_.insert([mv(1000 + i * 100, i) for i in range(30)])
        st_.compact(now=60_000)
        with pytest.raises(BadWidth) as exc:
            st_.query_bins(Predicate(), 0, 10_000, 1500)
        assert "1000" in str(exc.value)

    def test_empty_range_empty_list(self):
        st_ = TimeSeriesStore()
        assert st_.query_bins(Predicate(), 0, 1000, 100) == []

    def test_mixed_raw_and_binned_aggregation(self):
        st_ = TimeSeriesStore(policy=small_policy())
        st_.insert([mv(1000, 2.0), mv(1500, 4.0)])
        st_.compact(now=20_000)            # those two now live in a 1 s bin
        st_.insert([mv(1800, 6.0)])        # late raw value in the same window
        bins = st_.query_bins(Predicate(), 0, 5000, 1000)
        assert len(bins) == 1
        _, b = bins[0]
        assert b.count == 3
        assert b.mean == pytest.approx((2 + 4 + 6) / 3)
        assert (b.vmin, b.vmax) == (2.0, 6.0)


class TestConservation:
    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6,
                              allow_nan=False, allow_infinity=False),
                    min_size=1, max_size=200),
           st.integers(min_value=1, max_value=50))
    def test_weighted_bin_mean_equals_raw_mean(self, values, spacing):
        st_ = TimeSeriesStore(policy=small_policy())
        vals = [mv(1000 + i * spacing * 10, v) for i, v in enumerate(values)]
        # dedupe times: MetricValue times must be unique for this check
        seen, unique = set(), []
        for v in vals:
            if v.time not in seen:
                seen.add(v.time)
                unique.append(v)
        st_.insert(unique)
        st_.compact(now=10_000_000)
        bins = st_.query_bins(Predicate(), 0, 10_000_000, 10_000)
        total = sum(b.count for _, b in bins)
        assert total == len(unique)
        w_mean = weighted_mean([(b.mean, b.count) for _, b in bins])
        raw_mean = float(np.sum([v.value for v in unique]) / len(unique))
        if raw_mean != 0:
            assert abs(w_mean - raw_mean) <= 1e-9 * max(abs(raw_mean), 1.0)
        assert min(b.vmin for _, b in bins) == min(v.value for v in unique)
        assert max(b.vmax for _, b in bins) == max(v.value for v in unique)

    def test_commutation_query_before_and_after_compaction(self):
        rng = random.Random(3)
        raw = [mv(i * 250, rng.uniform(-5, 5)) for i in range(200)]
        a = TimeSeriesStore(policy=small_policy())
        a.insert(raw)
        before = a.query_bins(Predicate(), 0, 60_000, 10_000)
        a.compact(now=1_000_000)
        after = a.query_bins(Predicate(), 0, 60_000, 10_000)
        assert len(before) == len(after)
        for (k1, b1), (k2, b2) in zip(before, after):
            assert k1 == k2
            assert b1.t_start == b2.t_start
            assert b1.count == b2.count
            assert b1.mean == pytest.approx(b2.mean, rel=1e-12)
            assert b1.vmin == b2.vmin and b1.vmax == b2.vmax


class TestRetentionPolicy:
    def test_validation(self):
        with pytest.raises(StoreError):
            RetentionPolicy(tiers=((0, 0), (100, 50), (50, 100)))  # ages not increasing
        with pytest.raises(StoreError):
            RetentionPolicy(tiers=((0, 0), (100, 60), (200, 90)))  # 90 not multiple of 60
        with pytest.raises(StoreError):
            RetentionPolicy(tiers=((100, 10),))  # raw tier missing

    def test_steps(self):
        p = small_policy()
        assert p.steps() == [(0, 1000, 10_000), (1000, 10_000, 100_000)]


class TestDisk:
    def test_persist_and_reload(self, tmp_path):
        path = str(tmp_path / "store")
        a = TimeSeriesStore(path=path, policy=small_policy())
        a.insert([mv(1000 + i * 100, float(i)) for i in range(20)])
        a.compact(now=60_000)
        a.insert([mv(70_000, 42.0)])
        a.flush()
        a.close()
        b = TimeSeriesStore(path=path, policy=small_policy())
        raw = b.query_raw(Predicate(), 0, 100_000)
        assert [(v.time, v.value) for v in raw] == [(70_000, 42.0)]
        bins = b.query_bins(Predicate(), 0, 10_000, 1000)
        assert sum(x.count for _, x in bins) == 20

    def test_csv_export(self, tmp_path):
        import io

        a = TimeSeriesStore(policy=small_policy())
        a.insert([mv(1000, 1.5), mv(2000, 2.5)])
        a.compact(now=60_000)
        a.insert([mv(70_000, 3.5)])
        raw_out, bin_out = io.StringIO(), io.StringIO()
        assert a.export_raw_csv(raw_out) == 1
        assert a.export_bins_csv(bin_out) == 2
        assert "F1/c/n1/Load5,70000,3.5" in raw_out.getvalue()
        first_bin = bin_out.getvalue().splitlines()[0]
        assert first_bin.startswith("F1/c/n1/Load5,1000,2000,1.5,1.5,1.5,1")
