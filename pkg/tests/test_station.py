import threading
import time

import pytest

from gridmon.clock import Clock
from gridmon.metrics import MetricValue
from gridmon.signing import sign
from gridmon.simnet import NodeTable, SimCollectModule, SimNode
from gridmon.station import ScheduleEntry, StationConfig, StationServer
from gridmon.subscription import FilterSpec, Predicate
from gridmon.wire import Connection, WireError

from conftest import wait_until

TRUST = "station-trust"


@pytest.fixture
def station(fast_clock):
    nodes = NodeTable()
    for i in range(3):
        nodes.add(SimNode(f"n{i}", farm="f1", cluster="c", seed=3, params=4,
                          mean_service_ms=50))
    st = StationServer(StationConfig(
        station_id="st1", farm="f1", groups={"sim"}, trust_key=TRUST,
        schedule=[ScheduleEntry("sim_load", ["n0", "n1", "n2"],
                                period_ms=1_000, deadline_ms=800)]),
        fast_clock)
    st.register_module(SimCollectModule(nodes))
    st.apply_schedule()
    st.start()
    yield st
    st.stop()


def connect(station) -> Connection:
    return Connection.open_endpoint(station.endpoint)


class TestSubscribeFlow:
    def test_subscribe_receives_matching_data(self, station):
        conn = connect(station)
        ack = conn.rpc({"type": "SUBSCRIBE",
                        "predicate": Predicate(param_re="Load1").to_wire()})
        assert ack["type"] == "SUBSCRIBE_ACK"
        frame = conn.recv()
        assert frame["type"] == "DATA"
        values = [MetricValue.from_wire(v) for v in frame["values"]]
        assert values and all(v.param == "Load1" for v in values)
        conn.close()

    def test_unsubscribe_stops_flow(self, station):
        conn = connect(station)
        ack = conn.rpc({"type": "SUBSCRIBE", "predicate": {}})
        sub_id = ack["sub_id"]
        reply = conn.rpc({"type": "UNSUBSCRIBE", "sub_id": sub_id})
        assert reply["type"] == "UNSUBSCRIBE_ACK"
        conn.close()

    def test_invalid_predicate_error_frame(self, station):
        conn = connect(station)
        with pytest.raises(WireError) as e:
            conn.rpc({"type": "SUBSCRIBE", "predicate": {"farm_re": "("}})
        assert e.value.code == "MALFORMED"
        conn.close()


class TestHistoryFlow:
    def test_raw_history(self, station):
        assert wait_until(lambda: station.ingested > 0, timeout_s=10)
        now = station.clock.now_ms()
        conn = connect(station)
        reply = conn.rpc({"type": "HISTORY",
                          "predicate": {"param_re": "Load1",
                                        "t1": now - 3_600_000, "t2": now}})
        assert reply["type"] == "HISTORY_RESULT"
        assert len(reply["values"]) >= 1
        conn.close()

    def test_missing_bounds_rejected(self, station):
        conn = connect(station)
        with pytest.raises(WireError):
            conn.rpc({"type": "HISTORY", "predicate": {"param_re": ".*"}})
        conn.close()


class TestFilterFlow:
    def test_deploy_and_emission(self, station):
        spec = FilterSpec("sumLoad", Predicate(param_re="Load1"), "SUM",
                          500, "farm_load")
        conn = connect(station)
        ack = conn.rpc({"type": "FILTER_DEPLOY", "spec": spec.to_wire(),
                        "signature": sign(TRUST, spec.signable())})
        assert ack["type"] == "FILTER_ACK"
        sub = connect(station)
        sub.rpc({"type": "SUBSCRIBE",
                 "predicate": Predicate(cluster_re="_filters").to_wire()})
        frame = sub.recv()
        assert frame["type"] == "DATA"
        v = MetricValue.from_wire(frame["values"][0])
        assert (v.cluster, v.node, v.param) == ("_filters", "sumLoad", "farm_load")
        conn.close()
        sub.close()

    def test_bad_signature_rejected(self, station):
        spec = FilterSpec("evil", Predicate(), "SUM", 500, "x")
        conn = connect(station)
        with pytest.raises(WireError) as e:
            conn.rpc({"type": "FILTER_DEPLOY", "spec": spec.to_wire(),
                      "signature": "deadbeef"})
        assert e.value.code == "BAD_SIGNATURE"
        conn.close()


class TestAdminFlow:
    def test_module_toggle_stops_scheduling(self, station):
        conn = connect(station)
        ack = conn.rpc({"type": "ADMIN", "action": "module_toggle",
                        "module": "sim_load", "enabled": False})
        assert ack["type"] == "ADMIN_ACK"
        assert not station.engine.module_enabled("sim_load")
        before = station.engine.dispatched
        time.sleep(0.4)  # multiple periods at scale 10
        assert station.engine.dispatched <= before + 3  # in-flight tail only
        conn.close()

    def test_unknown_module_error(self, station):
        conn = connect(station)
        with pytest.raises(WireError) as e:
            conn.rpc({"type": "ADMIN", "action": "module_toggle",
                      "module": "ghost", "enabled": False})
        assert e.value.code == "UNKNOWN_MODULE"
        conn.close()

    def test_restart_target_handler(self, station):
        station.restart_handler = lambda target: target == "n1"
        conn = connect(station)
        ack = conn.rpc({"type": "ADMIN", "action": "restart_target",
                        "target": "n1"})
        assert ack["type"] == "ADMIN_ACK"
        with pytest.raises(WireError):
            conn.rpc({"type": "ADMIN", "action": "restart_target",
                      "target": "ghost"})
        conn.close()

    def test_token_gate(self, fast_clock):
        st = StationServer(StationConfig(
            station_id="st2", farm="f", groups={"g"}, token="secret"),
            fast_clock)
        st.start()
        try:
            conn = Connection.open_endpoint(st.endpoint)
            with pytest.raises(WireError) as e:
                conn.rpc({"type": "ADMIN", "action": "module_toggle",
                          "module": "sim_load", "enabled": False})
            assert e.value.code == "BAD_TOKEN"
            with pytest.raises(WireError) as e2:
                conn.rpc({"type": "ADMIN", "action": "module_toggle",
                          "module": "sim_load", "enabled": False,
                          "token": "secret"})
            assert e2.value.code == "UNKNOWN_MODULE"  # authorized, module absent
            conn.close()
        finally:
            st.stop()


class TestConnectionCleanup:
    def test_disconnect_cleans_subscriptions(self, station):
        conn = connect(station)
        conn.rpc({"type": "SUBSCRIBE", "predicate": {}})
        assert wait_until(lambda: len(station.hub.active_subscriptions()) == 1)
        conn.close()
        assert wait_until(lambda: station.hub.active_subscriptions() == [],
                          timeout_s=10)

    def test_ping(self, station):
        conn = connect(station)
        assert conn.rpc({"type": "PING"})["service_id"] == "st1"
        conn.close()
