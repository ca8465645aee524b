"""Secondary-component integration: the built dashboard against live services.

Runs the dashboard's compiled modules under node against a live scenario's
HTTP API. Skipped entirely when the frontend has not been built, so the
primary suite stays headless.
"""
import json
import shutil
import subprocess
import threading
import time
import urllib.request
from pathlib import Path

import pytest

from gridmon.registry import RegistryClient, ServiceDescriptor
from gridmon.scenario import (FarmSpec, LinkSpec, ReflectorSpec, Scenario,
                              ScenarioConfig)

from conftest import wait_until

FRONTEND = Path(__file__).resolve().parent.parent / "frontend"

pytestmark = pytest.mark.skipif(
    shutil.which("node") is None or not (FRONTEND / "dist" / "app.js").exists(),
    reason="dashboard not built (cd frontend && npm install && npm run build)")


def node_eval(script: str) -> dict:
    proc = subprocess.run(["node", "--input-type=module", "-e", script],
                          capture_output=True, text=True, timeout=60,
                          cwd=str(FRONTEND))
    assert proc.returncode == 0, proc.stderr
    return json.loads(proc.stdout.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def live():
    cfg = ScenarioConfig(seed=21, duration_ms=600_000, time_scale=10.0)
    cfg.farms = [FarmSpec(name="f1", nodes=3, params_per_node=4,
                          period_ms=3_000, deadline_ms=1_500,
                          mean_service_ms=150)]
    cfg.reflectors = ReflectorSpec(
        ids=["a", "b", "c"], probe_period_ms=500, loss_window=10,
        reply_timeout_ms=300, recompute_ms=2_000,
        links=[LinkSpec("a", "b", 10.0), LinkSpec("b", "c", 20.0),
               LinkSpec("a", "c", 50.0)])
    sc = Scenario(cfg)
    sc.start()
    assert wait_until(lambda: sc.repo.upstream_count() >= 1, timeout_s=15)
    assert wait_until(lambda: sc.repo.optimizer.tree is not None, timeout_s=15)
    yield sc
    sc.stop()


class TestServiceMap:
    def test_new_registration_reflected_within_2s(self, live):
        """A service registered now shows up via the dashboard client fast."""
        base = f"http://{live.repo.http_endpoint}"
        client = RegistryClient([live.registries[0].endpoint], live.clock)
        t0 = time.monotonic()
        client.register(ServiceDescriptor(
            service_id="late-arrival", groups=frozenset({"sim"}),
            attributes={"kind": "witness"}, endpoint="127.0.0.1:1"), 60_000)
        # poll through the dashboard's own ApiClient (compiled)
        script = f"""
import {{ ApiClient }} from "./dist/api.js";
const api = new ApiClient("{base}");
const t0 = Date.now();
while (Date.now() - t0 < 5000) {{
  const {{ services }} = await api.services();
  if (services.some(s => s.service_id === "late-arrival")) {{
    console.log(JSON.stringify({{ seen_ms: Date.now() - t0 }}));
    process.exit(0);
  }}
  await new Promise(r => setTimeout(r, 50));
}}
console.log(JSON.stringify({{ seen_ms: null }}));
"""
        out = node_eval(script)
        elapsed = time.monotonic() - t0
        client.close()
        assert out["seen_ms"] is not None
        assert elapsed < 2.0, f"registration took {elapsed:.2f}s to appear"


class TestMstView:
    def test_live_tree_update_restyles_exactly_the_diff(self, live):
        base = f"http://{live.repo.http_endpoint}"
        before = json.loads(urllib.request.urlopen(
            f"{base}/api/mst", timeout=5).read())
        assert any(e["in_tree"] for e in before["edges"])
        # capture the next TreeUpdate from the live stream while we break
        # the a-b link so the tree must change
        captured = {}

        def read_stream():
            req = urllib.request.Request(f"{base}/api/stream")
            with urllib.request.urlopen(req, timeout=30) as resp:
                event = None
                while "tree" not in captured:
                    line = resp.readline().decode().strip()
                    if line.startswith("event:"):
                        event = line.split(":", 1)[1].strip()
                    elif line.startswith("data:") and event == "tree":
                        captured["tree"] = json.loads(line.split(":", 1)[1])
                        return

        reader = threading.Thread(target=read_stream, daemon=True)
        reader.start()
        from gridmon.scenario import FaultEvent

        live.inject_fault(FaultEvent(at_ms=0, action="set_link",
                                     a="a", b="b", loss=0.95))
        reader.join(timeout=30)
        assert "tree" in captured, "no TreeUpdate arrived after the link fault"
        update = captured["tree"]
        after = json.loads(urllib.request.urlopen(
            f"{base}/api/mst", timeout=5).read())
        # run the real payloads through the compiled dashboard logic
        script = f"""
import {{ edgeViews, restyledEdges }} from "./dist/mstview.js";
const before = {json.dumps(before)};
const after = {json.dumps(after)};
const update = {json.dumps(update)};
const seen = new Set();
const v1 = edgeViews(before, seen, null);
for (const e of v1) seen.add(e.u < e.v ? e.u + "|" + e.v : e.v + "|" + e.u);
const v2 = edgeViews(after, seen, update);
console.log(JSON.stringify({{
  restyled: restyledEdges(v1, v2),
  diff: [...update.added.map(e => e.u < e.v ? e.u+"|"+e.v : e.v+"|"+e.u),
         ...update.removed.map(e => e.u < e.v ? e.u+"|"+e.v : e.v+"|"+e.u)].sort(),
}}));
"""
        out = node_eval(script)
        assert out["restyled"] == out["diff"], \
            f"restyled {out['restyled']} != tree diff {out['diff']}"
        live.inject_fault(FaultEvent(at_ms=0, action="set_link",
                                     a="a", b="b", loss=0.0))


class TestAdminPanel:
    def test_module_toggle_round_trip_stops_series(self, live):
        base = f"http://{live.repo.http_endpoint}"
        station = live.stations[0]
        script = f"""
import {{ ApiClient }} from "./dist/api.js";
const api = new ApiClient("{base}");
const denied = await api.admin(
  {{ kind: "MODULE_TOGGLE", target: "station-f1",
     payload: {{ module: "sim_load", enabled: false }} }}, "wrong-token");
const ok = await api.admin(
  {{ kind: "MODULE_TOGGLE", target: "station-f1",
     payload: {{ module: "sim_load", enabled: false }} }}, "admin-dev");
console.log(JSON.stringify({{ denied: denied.status, ok: ok.status }}));
"""
        out = node_eval(script)
        assert out["denied"] == 403
        assert out["ok"] == 200
        assert not station.engine.module_enabled("sim_load")
        # the series stops advancing within one collect period
        dispatched = station.engine.dispatched
        live.clock.sleep(3_000 + 500)
        time.sleep(0.1)
        assert station.engine.dispatched <= dispatched + 3  # in-flight tail
        # restore for the other tests
        script_on = script.replace("enabled: false", "enabled: true")
        node_eval(script_on)
        assert station.engine.module_enabled("sim_load")
