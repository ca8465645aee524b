/**
 * Dashboard view state and the reducer that folds stream events into it.
 *
 * Rendering is a pure function of this state, and the state is a pure
 * fold over (initial snapshot, stream events): replaying a recorded API
 * session reproduces the exact same view.
 */
import type {
  Alert,
  MstPayload,
  RegistryStreamEvent,
  ServiceEntry,
  StreamEvent,
  TreeUpdateEvent,
} from "./api.js";

export interface LiveSeries {
  key: string;
  points: [number, number | null][]; // null value = gap marker
}

export interface ViewState {
  services: Map<string, ServiceEntry>;
  selectedGroup: string | null;
  selectedSeries: string | null;
  adminToken: string;
  tree: MstPayload | null;
  lastTreeUpdate: TreeUpdateEvent | null;
  alerts: Alert[];
  live: Map<string, LiveSeries>;
  liveCap: number;
  connection: "connecting" | "live" | "reconnecting";
  eventsSeen: number;
}

export function initialState(): ViewState {
  return {
    services: new Map(),
    selectedGroup: null,
    selectedSeries: null,
    adminToken: "",
    tree: null,
    lastTreeUpdate: null,
    alerts: [],
    live: new Map(),
    liveCap: 600,
    connection: "connecting",
    eventsSeen: 0,
  };
}

export function seedServices(state: ViewState, services: ServiceEntry[]): void {
  for (const s of services) {
    state.services.set(s.service_id, s);
  }
}

export function seedTree(state: ViewState, tree: MstPayload): void {
  state.tree = tree;
}

function applyRegistry(state: ViewState, ev: RegistryStreamEvent): void {
  const existing = state.services.get(ev.descriptor.service_id);
  if (ev.kind === "ServiceRemoved") {
    if (existing) existing.status = "gone";
    return;
  }
  state.services.set(ev.descriptor.service_id, {
    ...ev.descriptor,
    status: "live",
    seen: ev.at,
  });
}

function applyTree(state: ViewState, update: TreeUpdateEvent): void {
  state.lastTreeUpdate = update;
  const inTree = new Set(update.edges.map((e) => `${e.u}|${e.v}`));
  if (state.tree) {
    // fold the update into the cached graph payload
    const known = new Set(state.tree.edges.map((e) => `${e.u}|${e.v}`));
    for (const e of update.edges) {
      if (!known.has(`${e.u}|${e.v}`)) {
        state.tree.edges.push({ u: e.u, v: e.v, w: e.w, in_tree: true });
      }
    }
    for (const edge of state.tree.edges) {
      edge.in_tree = inTree.has(`${edge.u}|${edge.v}`);
      const fresh = update.edges.find((e) => e.u === edge.u && e.v === edge.v);
      if (fresh && fresh.w !== null) edge.w = fresh.w;
    }
    state.tree.epoch = update.epoch;
    state.tree.total_weight = update.total_weight;
    state.tree.components = update.components;
    state.tree.updates += 1;
  }
}

function applyData(state: ViewState, values: { farm: string; cluster: string; node: string; param: string; time: number; value: number }[]): void {
  for (const v of values) {
    const key = `${v.farm}/${v.cluster}/${v.node}/${v.param}`;
    let series = state.live.get(key);
    if (!series) {
      series = { key, points: [] };
      state.live.set(key, series);
    }
    series.points.push([v.time, v.value]);
    if (series.points.length > state.liveCap) {
      series.points.splice(0, series.points.length - state.liveCap);
    }
  }
}

function applyGap(state: ViewState, at: number): void {
  state.connection = "reconnecting";
  for (const series of state.live.values()) {
    const last = series.points[series.points.length - 1];
    if (last && last[1] !== null) {
      series.points.push([at, null]);
    }
  }
}

export function applyStream(state: ViewState, ev: StreamEvent): ViewState {
  state.eventsSeen += 1;
  switch (ev.type) {
    case "registry":
      applyRegistry(state, ev.payload);
      break;
    case "tree":
      applyTree(state, ev.payload);
      break;
    case "data":
      state.connection = "live";
      applyData(state, ev.payload.values);
      break;
    case "alert":
      state.alerts.push(ev.payload);
      break;
    case "gap":
      applyGap(state, ev.payload.at);
      break;
  }
  return state;
}

export function replay(events: StreamEvent[], base?: ViewState): ViewState {
  const state = base ?? initialState();
  for (const ev of events) {
    applyStream(state, ev);
  }
  return state;
}

/** Services of the selected group, every group when none is selected. */
export function visibleServices(state: ViewState): ServiceEntry[] {
  const out: ServiceEntry[] = [];
  for (const s of state.services.values()) {
    if (!state.selectedGroup || s.groups.includes(state.selectedGroup)) {
      out.push(s);
    }
  }
  return out.sort((a, b) => a.service_id.localeCompare(b.service_id));
}

export function groups(state: ViewState): string[] {
  const all = new Set<string>();
  for (const s of state.services.values()) {
    for (const g of s.groups) all.add(g);
  }
  return [...all].sort();
}
