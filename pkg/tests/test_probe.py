import random
import time

import pytest
from hypothesis import given, settings, strategies as st

from gridmon.clock import Clock, ManualClock
from gridmon.probe import (LinkStats, PACKET_LEN, ProbeAgent, ProbeConfig,
                           ProbePacket, TYPE_REPLY, TYPE_REQUEST, UNUSABLE,
                           UdpTransport, cost_from, decode_packet, link_cost,
                           peer_id_bytes)
from gridmon.simnet import VirtualNetwork

from conftest import wait_until
from oracles import ema_sequence, jitter_sequence


class TestCodec:
    def test_round_trip_exact(self):
        p = ProbePacket(TYPE_REQUEST, seq=1, t_send_ns=10 ** 9,
                        sender_id=peer_id_bytes("agent-a"))
        data = p.encode()
        assert len(data) == PACKET_LEN == 33
        assert decode_packet(data) == p

    def test_short_datagram_rejected(self):
        with pytest.raises(ValueError):
            decode_packet(b"\0" * 32)

    def test_wrong_magic_rejected(self):
        p = ProbePacket(TYPE_REQUEST, 1, 1, b"\0" * 16).encode()
        with pytest.raises(ValueError):
            decode_packet(b"XXXX" + p[4:])

    def test_bad_type_rejected(self):
        p = bytearray(ProbePacket(TYPE_REQUEST, 1, 1, b"\0" * 16).encode())
        p[4] = 7
        with pytest.raises(ValueError):
            decode_packet(bytes(p))

    @settings(max_examples=200, deadline=None)
    @given(ptype=st.sampled_from([TYPE_REQUEST, TYPE_REPLY]),
           seq=st.integers(min_value=0, max_value=2 ** 32 - 1),
           t=st.integers(min_value=0, max_value=2 ** 64 - 1),
           sender=st.binary(min_size=16, max_size=16))
    def test_identity_on_field_domain(self, ptype, seq, t, sender):
        p = ProbePacket(ptype, seq, t, sender)
        assert decode_packet(p.encode()) == p


class TestRecurrences:
    def test_ema_frozen_value(self):
        s = LinkStats("p", ProbeConfig(alpha=0.25))
        s.record_sample(100.0, 0)
        s.record_sample(80.0, 1)
        # (1 - 0.25) * 100 + 0.25 * 80
        assert s.ema_rtt == pytest.approx(95.0)
        assert s.ema_rtt == pytest.approx(ema_sequence([100.0, 80.0], 0.25))

    def test_jitter_frozen_value(self):
        s = LinkStats("p", ProbeConfig(gamma=1 / 16))
        s.record_sample(10.0, 0)
        s.record_sample(14.0, 1)
        # 0 + (1/16) * (|14-10| - 0)
        assert s.jitter == pytest.approx(0.25)
        assert s.jitter == pytest.approx(jitter_sequence([10.0, 14.0], 1 / 16))

    def test_first_sample_initialization(self):
        s = LinkStats("p", ProbeConfig())
        s.record_sample(42.0, 0)
        assert s.ema_rtt == 42.0
        assert s.jitter == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=0, max_value=1e4, allow_nan=False),
                    min_size=1, max_size=100))
    def test_recurrences_match_oracle(self, samples):
        cfg = ProbeConfig(alpha=0.25, gamma=1 / 16)
        s = LinkStats("p", cfg)
        for i, x in enumerate(samples):
            s.record_sample(x, i)
        assert s.ema_rtt == pytest.approx(ema_sequence(samples, 0.25), rel=1e-12)
        assert s.jitter == pytest.approx(jitter_sequence(samples, 1 / 16), abs=1e-12)

    def test_ema_convergence_on_constant_stream(self):
        s = LinkStats("p", ProbeConfig())
        for i in range(50):
            s.record_sample(77.0, i)
        assert abs(s.ema_rtt - 77.0) < 1e-6 * 77.0
        assert s.jitter < 1e-3

    def test_decay_rates_from_perturbed_state(self):
        s = LinkStats("p", ProbeConfig(alpha=0.25, gamma=1 / 16))
        s.record_sample(123.0, 0)
        s.record_sample(200.0, 1)
        s.record_sample(77.0, 2)  # the jump into the constant regime
        ema_err0 = abs(s.ema_rtt - 77.0)
        jitter0 = s.jitter
        for i in range(50):
            s.record_sample(77.0, 3 + i)
        assert abs(s.ema_rtt - 77.0) <= ema_err0 * (0.75 ** 50) * 1.01 + 1e-12
        assert s.jitter <= jitter0 * ((15 / 16) ** 50) * 1.01 + 1e-12


class TestLoss:
    def test_counting(self):
        cfg = ProbeConfig(window=10, reply_timeout_ms=100, period_ms=50)
        s = LinkStats("p", cfg)
        for seq in range(10):
            s.note_sent(seq, 1000 + seq)
        for seq in range(8):  # 2 never acked
            s.note_ack(seq, 1050 + seq)
        assert s.record_loss(now_ms=5000) == pytest.approx(0.2)

    def test_all_acked_zero(self):
        cfg = ProbeConfig(window=10, reply_timeout_ms=100)
        s = LinkStats("p", cfg)
        for seq in range(10):
            s.note_sent(seq, 1000)
            s.note_ack(seq, 1010)
        assert s.record_loss(now_ms=5000) == 0.0

    def test_young_sends_not_counted(self):
        cfg = ProbeConfig(window=10, reply_timeout_ms=1000)
        s = LinkStats("p", cfg)
        s.note_sent(0, 1000)  # old and lost
        for seq in range(1, 4):
            s.note_sent(seq, 4990)  # younger than the timeout at now=5000
        assert s.record_loss(now_ms=5000) == pytest.approx(1 / 10)

    def test_binomial_oracle_mean_loss(self):
        # Bernoulli(p=0.3) drops over 1000 probes: the mean of the sweep
        # estimates converges to p (window-mean std ~0.015 at W=50)
        cfg = ProbeConfig(window=50, reply_timeout_ms=100, period_ms=200)
        s = LinkStats("p", cfg)
        rng = random.Random(1234)
        estimates = []
        t = 0.0
        for seq in range(1000):
            t += cfg.period_ms
            s.note_sent(seq, t)
            if rng.random() >= 0.3:
                s.note_ack(seq, t + 10)
            estimates.append(s.record_loss(now_ms=t + cfg.period_ms))
        measured = sum(estimates[100:]) / len(estimates[100:])
        assert 0.25 <= measured <= 0.35


class TestCost:
    def test_neutral_factors(self):
        assert cost_from(50.0, 0.0, 0.0) == pytest.approx(50.0)

    def test_loss_factor_frozen_value(self):
        # 50 * (1/(1-0.25))^2 = 50 * (4/3)^2 = 800/9
        assert cost_from(50.0, 0.0, 0.25) == pytest.approx(800.0 / 9.0)

    def test_cutoff_unusable(self):
        assert cost_from(50.0, 0.0, 0.6) is UNUSABLE
        assert cost_from(50.0, 0.0, 0.5) is UNUSABLE  # boundary inclusive

    def test_no_samples_unusable(self):
        s = LinkStats("p", ProbeConfig())
        assert link_cost(s) is UNUSABLE

    def test_silence_for_three_windows_unusable(self):
        cfg = ProbeConfig(window=10, period_ms=100)
        s = LinkStats("p", cfg)
        s.record_sample(10.0, 0)
        s.note_sent(0, 0)
        s.note_ack(0, 5)
        assert link_cost(s, now_ms=5 + 3 * 10 * 100) is not UNUSABLE
        assert link_cost(s, now_ms=6 + 3 * 10 * 100) is UNUSABLE

    @settings(max_examples=100, deadline=None)
    @given(rtt=st.floats(min_value=0.1, max_value=1e4),
           jitter=st.floats(min_value=0, max_value=1e3),
           loss=st.floats(min_value=0, max_value=0.49),
           bump=st.floats(min_value=1e-3, max_value=10.0))
    def test_strictly_increasing_in_each_argument(self, rtt, jitter, loss, bump):
        base = cost_from(rtt, jitter, loss)
        assert cost_from(rtt + bump, jitter, loss) > base
        assert cost_from(rtt, jitter + bump, loss) > base
        worse_loss = min(loss + bump * 0.01, 0.499)
        if worse_loss > loss:
            assert cost_from(rtt, jitter, worse_loss) > base


class TestAgents:
    def test_virtual_net_measures_configured_link(self):
        clock = Clock(scale=10)
        net = VirtualNetwork(clock, seed=3)
        net.set_link("a", "b", base_rtt_ms=40.0, jitter_ms=0.0, loss=0.0)
        cfg = ProbeConfig(period_ms=300, window=10, reply_timeout_ms=150)
        a = ProbeAgent("a", net.transport("a"), clock, cfg)
        b = ProbeAgent("b", net.transport("b"), clock, cfg)
        a.set_peers({"b": "b"})
        b.set_peers({"a": "a"})
        a.start(); b.start()
        try:
            assert wait_until(
                lambda: a.stats_snapshot()["b"].samples >= 10, timeout_s=10)
        finally:
            a.stop(); b.stop()
        snap = a.stats_snapshot()["b"]
        assert snap.ema_rtt == pytest.approx(40.0, abs=1.0)
        assert snap.loss == 0.0
        assert snap.cost == pytest.approx(40.0, rel=0.05)

    def test_injected_loss_measured(self):
        clock = Clock(scale=20)
        net = VirtualNetwork(clock, seed=99)
        net.set_link("a", "b", base_rtt_ms=10.0, jitter_ms=0.0, loss=0.3)
        cfg = ProbeConfig(period_ms=100, window=50, reply_timeout_ms=50)
        a = ProbeAgent("a", net.transport("a"), clock, cfg)
        b = ProbeAgent("b", net.transport("b"), clock, cfg)
        a.set_peers({"b": "b"})
        b.set_peers({"a": "a"})
        a.start(); b.start()
        try:
            assert wait_until(lambda: a._seq["b"] >= 80, timeout_s=20)
        finally:
            a.stop(); b.stop()
        assert 0.15 <= a.stats_snapshot()["b"].loss <= 0.45

    def test_real_udp_round_trip(self):
        clock = Clock()
        ta, tb = UdpTransport(), UdpTransport()
        cfg = ProbeConfig(period_ms=30, window=10, reply_timeout_ms=500)
        a = ProbeAgent("ua", ta, clock, cfg)
        b = ProbeAgent("ub", tb, clock, cfg)
        a.set_peers({"ub": tb.addr})
        b.set_peers({"ua": ta.addr})
        a.start(); b.start()
        try:
            assert wait_until(lambda: a.stats_snapshot()["ub"].samples >= 5,
                              timeout_s=10)
        finally:
            a.stop(); b.stop()
        snap = a.stats_snapshot()["ub"]
        assert snap.ema_rtt is not None and 0 <= snap.ema_rtt < 100.0
        assert b.requests_seen >= 5

    def test_malformed_datagram_counted_ignored(self):
        clock = Clock()
        net = VirtualNetwork(clock, seed=1)
        a = ProbeAgent("a", net.transport("a"), clock, ProbeConfig())
        a.on_datagram(b"garbage", "x")
        a.on_datagram(b"\0" * 33, "x")
        assert a.malformed == 2

    def test_peer_reconfiguration_drops_stats(self):
        clock = ManualClock()
        net = VirtualNetwork(clock, seed=1)
        a = ProbeAgent("a", net.transport("a"), clock, ProbeConfig())
        a.set_peers({"b": "b", "c": "c"})
        assert set(a.stats_snapshot()) == {"b", "c"}
        a.set_peers({"c": "c"})
        assert set(a.stats_snapshot()) == {"c"}

    def test_stats_exported_as_metrics(self):
        clock = Clock(scale=10)
        net = VirtualNetwork(clock, seed=3)
        net.set_link("a", "b", base_rtt_ms=25.0)
        out = []
        cfg = ProbeConfig(period_ms=200, window=10, reply_timeout_ms=100)
        a = ProbeAgent("a", net.transport("a"), clock, cfg, emit=out.extend,
                       farm="a")
        b = ProbeAgent("b", net.transport("b"), clock, cfg)
        a.set_peers({"b": "b"}); b.set_peers({"a": "a"})
        a.start(); b.start()
        try:
            assert wait_until(lambda: len(out) >= 3, timeout_s=10)
        finally:
            a.stop(); b.stop()
        params = {(v.farm, v.cluster, v.node, v.param) for v in out}
        assert ("a", "_links", "b", "rtt_ms") in params
        assert ("a", "_links", "b", "jitter_ms") in params
        assert ("a", "_links", "b", "loss") in params
