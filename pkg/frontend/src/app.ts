/**
 * DOM wiring. Everything interesting happens in state.ts / charts.ts /
 * mstview.ts; this file just renders the current ViewState and forwards
 * clicks to the API client.
 */
import { ApiClient, StreamConnection } from "./api.js";
import type { MstPayload, Series, StreamEvent } from "./api.js";
import { buildChart } from "./charts.js";
import { circularLayout, edgeViews, edgeKey } from "./mstview.js";
import type { EdgeView } from "./mstview.js";
import {
  applyStream, groups, initialState, seedServices, seedTree, visibleServices,
} from "./state.js";

// served next to the repo: same origin; served elsewhere: ?api=http://host:port
const apiBase = new URLSearchParams(location.search).get("api") ?? "";
const api = new ApiClient(apiBase);
const state = initialState();
const seenPairs = new Set<string>();
let knownSeries: Series[] = [];
let chartBins: Series | null = null;
let lastEdgeViews: EdgeView[] = [];
const auditLog: { at: number; text: string; ok: boolean }[] = [];

const $ = <T extends HTMLElement>(sel: string): T => {
  const el = document.querySelector(sel);
  if (!el) throw new Error(`missing element ${sel}`);
  return el as T;
};

// ------------------------------------------------------------- services

function renderServices(): void {
  const box = $("#services");
  const list = visibleServices(state);
  const picker = $("#group-picker") as HTMLSelectElement;
  const current = picker.value;
  picker.innerHTML =
    `<option value="">all groups</option>` +
    groups(state).map((g) => `<option value="${g}">${g}</option>`).join("");
  picker.value = current;
  if (list.length === 0) {
    box.innerHTML = `<div class="empty">no services in this group yet</div>`;
    return;
  }
  box.innerHTML = list
    .map((s) => {
      const cls = s.status === "live" ? "live" : "gone";
      const attrs = Object.entries(s.attributes)
        .map(([k, v]) => `${k}=${v}`)
        .join(" ");
      return `<div class="service ${cls}">
        <span class="dot ${cls}"></span>
        <b>${s.service_id}</b>
        <span class="meta">${[...s.groups].join(",")} · ${s.endpoint}</span>
        <span class="meta">${attrs}</span>
      </div>`;
    })
    .join("");
}

// --------------------------------------------------------------- charts

async function refreshSeriesList(): Promise<void> {
  const payload = await api.series({ t1: Date.now() - 3_600_000, t2: Date.now() });
  knownSeries = payload.series;
  const picker = $("#series-picker") as HTMLSelectElement;
  const current = picker.value;
  picker.innerHTML = knownSeries
    .map((s) => `<option value="${s.key}">${s.key} (${s.source})</option>`)
    .join("");
  if (current && knownSeries.some((s) => s.key === current)) {
    picker.value = current;
  } else if (knownSeries.length > 0 && !state.selectedSeries) {
    state.selectedSeries = knownSeries[0]?.key ?? null;
  }
}

async function loadHistory(): Promise<void> {
  // only series confirmed by /api/series metadata are chartable
  if (!state.selectedSeries) return;
  const meta = knownSeries.find((s) => s.key === state.selectedSeries);
  if (!meta) return;
  const now = Date.now();
  const payload = await api.series({
    farm: meta.farm, cluster: meta.cluster, node: meta.node,
    param: meta.param, t1: now - 3_600_000, t2: now, width: 60_000,
  });
  chartBins = payload.series.find((s) => s.key === state.selectedSeries) ?? null;
}

function renderChart(): void {
  const svg = $("#chart");
  const key = state.selectedSeries;
  const tail = key ? state.live.get(key)?.points ?? [] : [];
  const model = buildChart({
    bins: chartBins?.bins ?? [],
    tail,
    width: 640,
    height: 260,
  });
  const ticks = [
    ...model.xTicks.map(
      (t) => `<text class="tick" x="${t.x}" y="252">${t.label}</text>`),
    ...model.yTicks.map(
      (t) => `<text class="tick" x="4" y="${t.y}">${t.label}</text>`),
  ].join("");
  svg.innerHTML = `
    <path class="band" d="${model.bandPath}"></path>
    <path class="line" d="${model.linePath}"></path>
    ${ticks}`;
  $("#chart-title").textContent = key ?? "pick a series";
}

// ------------------------------------------------------------------ mst

function renderMst(): void {
  const payload = state.tree;
  const svg = $("#mst");
  if (!payload || payload.vertices.length === 0) {
    svg.innerHTML = `<text class="empty" x="20" y="40">no reflectors</text>`;
    $("#mst-meta").textContent = "";
    return;
  }
  const layout = circularLayout(payload.vertices, 640, 300);
  const views = edgeViews(payload, seenPairs, state.lastTreeUpdate);
  for (const e of views) seenPairs.add(edgeKey(e.u, e.v));
  lastEdgeViews = views;
  const lines = views
    .map((e) => {
      const a = layout.get(e.u);
      const b = layout.get(e.v);
      if (!a || !b) return "";
      return `<line class="edge ${e.cls}" x1="${a.x}" y1="${a.y}"
        x2="${b.x}" y2="${b.y}"><title>${e.tooltip}</title></line>`;
    })
    .join("");
  const nodes = [...layout.values()]
    .map(
      (n) => `<circle class="vertex" cx="${n.x}" cy="${n.y}" r="9">
        <title>${n.id}</title></circle>
       <text class="label" x="${n.x}" y="${n.y - 14}">${n.id}</text>`)
    .join("");
  svg.innerHTML = lines + nodes;
  $("#mst-meta").textContent =
    `epoch ${payload.epoch} · weight ${payload.total_weight.toFixed(1)} · ` +
    `${payload.updates} update(s)`;
}

// ---------------------------------------------------------------- admin

function audit(text: string, ok: boolean): void {
  auditLog.unshift({ at: Date.now(), text, ok });
  auditLog.splice(50);
  renderFeed();
}

function renderFeed(): void {
  const rows = [
    ...auditLog.map((a) => ({
      at: a.at, cls: a.ok ? "ok" : "denied",
      text: a.text,
    })),
    ...state.alerts.map((a) => ({
      at: a.at, cls: "alert",
      text: `ALERT ${a.target}: ${a.reason} (attempts at ${a.attempts.join(", ")})`,
    })),
  ].sort((x, y) => y.at - x.at);
  $("#feed").innerHTML = rows
    .map((r) => `<div class="feed-row ${r.cls}">
        <span class="ts">${new Date(r.at).toISOString().slice(11, 19)}</span>
        ${r.text}</div>`)
    .join("");
}

function banner(text: string, ok: boolean): void {
  const el = $("#admin-banner");
  el.textContent = text;
  el.className = ok ? "banner ok" : "banner denied";
}

async function adminToggle(off: boolean): Promise<void> {
  const target = ($("#admin-service") as HTMLInputElement).value;
  const module = ($("#admin-module") as HTMLInputElement).value;
  const result = await api.admin(
    { kind: "MODULE_TOGGLE", target, payload: { module, enabled: !off } },
    state.adminToken);
  banner(result.ok ? `module ${module} ${off ? "off" : "on"} @ ${target}`
                   : `denied: ${JSON.stringify(result.body)}`, result.ok);
  audit(`MODULE_TOGGLE ${module}=${!off} -> ${target}: ${result.status}`,
        result.ok);
}

async function adminRestart(): Promise<void> {
  const target = ($("#admin-service") as HTMLInputElement).value;
  const node = ($("#admin-node") as HTMLInputElement).value;
  const result = await api.admin(
    { kind: "RESTART_TARGET", target, payload: { node } }, state.adminToken);
  banner(result.ok ? `restart ${node} requested` : "denied", result.ok);
  audit(`RESTART_TARGET ${node} -> ${target}: ${result.status}`, result.ok);
}

async function deployFilter(): Promise<void> {
  const target = ($("#admin-service") as HTMLInputElement).value;
  const spec = {
    filter_id: ($("#filter-id") as HTMLInputElement).value,
    predicate: { param_re: ($("#filter-param") as HTMLInputElement).value },
    aggregate: ($("#filter-agg") as HTMLSelectElement).value,
    period_ms: Number(($("#filter-period") as HTMLInputElement).value),
    output_param: ($("#filter-out") as HTMLInputElement).value,
  };
  const signed = await api.signFilter(spec, state.adminToken);
  if (!signed.ok) {
    banner("signing denied: check the admin token", false);
    audit(`SIGN_FILTER ${spec.filter_id}: ${signed.status}`, false);
    return;
  }
  const body = signed.body as { spec: Record<string, unknown>; signature: string };
  const result = await api.admin(
    { kind: "DEPLOY_FILTER", target,
      payload: { spec: body.spec, signature: body.signature } },
    state.adminToken);
  banner(result.ok ? `filter ${spec.filter_id} deployed to ${target}` : "denied",
         result.ok);
  audit(`DEPLOY_FILTER ${spec.filter_id} -> ${target}: ${result.status}`,
        result.ok);
}

// ----------------------------------------------------------------- wiring

function renderAll(): void {
  renderServices();
  renderChart();
  renderMst();
  renderFeed();
  const dot = $("#conn-dot");
  dot.className = `dot ${state.connection === "live" ? "live" : "gone"}`;
  $("#conn-text").textContent = state.connection;
}

function onStreamEvent(ev: StreamEvent): void {
  applyStream(state, ev);
  if (ev.type === "data") {
    renderChart();
  } else {
    renderAll();
  }
}

async function boot(): Promise<void> {
  const [services, mst, alerts] = await Promise.all([
    api.services(), api.mst(), api.alerts()]);
  seedServices(state, services.services);
  seedTree(state, mst as MstPayload);
  state.alerts.push(...alerts.alerts);
  await refreshSeriesList();
  await loadHistory();
  renderAll();

  const stream = new StreamConnection(apiBase + "/api/stream", onStreamEvent);
  stream.connect();

  $("#group-picker").addEventListener("change", (ev) => {
    state.selectedGroup = (ev.target as HTMLSelectElement).value || null;
    renderServices();
  });
  $("#series-picker").addEventListener("change", async (ev) => {
    state.selectedSeries = (ev.target as HTMLSelectElement).value;
    await loadHistory();
    renderChart();
  });
  $("#admin-token").addEventListener("change", (ev) => {
    state.adminToken = (ev.target as HTMLInputElement).value;
  });
  $("#btn-refresh-series").addEventListener("click", () => {
    refreshSeriesList().then(loadHistory).then(renderChart);
  });
  $("#btn-toggle-off").addEventListener("click", () => adminToggle(true));
  $("#btn-toggle-on").addEventListener("click", () => adminToggle(false));
  $("#btn-restart").addEventListener("click", () => adminRestart());
  $("#btn-deploy").addEventListener("click", () => deployFilter());
  setInterval(() => renderServices(), 2_000);
}

boot().catch((err) => {
  document.body.innerHTML = `<pre class="fatal">dashboard failed to boot:
${String(err)}</pre>`;
});
