import { describe, expect, it } from "vitest";

import type { MstPayload, ServiceEntry, StreamEvent } from "../src/api.js";
import {
  applyStream, groups, initialState, replay, seedServices, seedTree,
  visibleServices,
} from "../src/state.js";

function svc(id: string, groups: string[] = ["sim"]): ServiceEntry {
  return {
    service_id: id, groups, attributes: { kind: "station" },
    endpoint: "127.0.0.1:1", proto_version: 1, registered_at: 1,
    status: "live", seen: 1,
  };
}

function registryEvent(kind: "ServiceAdded" | "ServiceRemoved",
                       id: string, at = 5): StreamEvent {
  const { status, seen, ...descriptor } = svc(id);
  return { type: "registry", payload: { kind, descriptor, at } };
}

describe("service map state", () => {
  it("a registration event makes the service appear without reload", () => {
    const state = initialState();
    applyStream(state, registryEvent("ServiceAdded", "st-new"));
    const shown = visibleServices(state);
    expect(shown.map((s) => s.service_id)).toEqual(["st-new"]);
    expect(shown[0]!.status).toBe("live");
  });

  it("lease expiry greys the service out instead of deleting it", () => {
    const state = initialState();
    seedServices(state, [svc("st-1")]);
    applyStream(state, registryEvent("ServiceRemoved", "st-1"));
    const shown = visibleServices(state);
    expect(shown).toHaveLength(1);
    expect(shown[0]!.status).toBe("gone");
  });

  it("empty group selection yields an empty panel state", () => {
    const state = initialState();
    seedServices(state, [svc("st-1", ["sim"])]);
    state.selectedGroup = "relay";
    expect(visibleServices(state)).toEqual([]);
    expect(groups(state)).toEqual(["sim"]);
  });
});

describe("live tail state", () => {
  const data = (time: number, value: number): StreamEvent => ({
    type: "data",
    payload: { values: [{ farm: "f", cluster: "c", node: "n", param: "p",
                          time, value }] },
  });

  it("appends matching values and caps the tail", () => {
    const state = initialState();
    state.liveCap = 5;
    for (let i = 0; i < 9; i++) applyStream(state, data(1000 + i, i));
    const tail = state.live.get("f/c/n/p")!.points;
    expect(tail).toHaveLength(5);
    expect(tail[0]![0]).toBe(1004);
    expect(state.connection).toBe("live");
  });

  it("a stream drop inserts one gap marker per live series", () => {
    const state = initialState();
    applyStream(state, data(1000, 1));
    applyStream(state, { type: "gap", payload: { at: 2000 } });
    applyStream(state, { type: "gap", payload: { at: 2500 } }); // no doubles
    const tail = state.live.get("f/c/n/p")!.points;
    expect(tail).toEqual([[1000, 1], [2000, null]]);
    expect(state.connection).toBe("reconnecting");
  });
});

describe("tree state", () => {
  const payload: MstPayload = {
    epoch: 1, total_weight: 30, components: 1,
    vertices: ["a", "b", "c"],
    edges: [
      { u: "a", v: "b", w: 10, in_tree: true },
      { u: "b", v: "c", w: 20, in_tree: true },
      { u: "a", v: "c", w: 50, in_tree: false },
    ],
    updates: 1,
  };

  it("folds a TreeUpdate into the cached graph", () => {
    const state = initialState();
    seedTree(state, structuredClone(payload));
    applyStream(state, {
      type: "tree",
      payload: {
        epoch: 2, total_weight: 25, components: 1,
        edges: [{ u: "a", v: "b", w: 10 }, { u: "a", v: "c", w: 15 }],
        added: [{ u: "a", v: "c", w: 15 }],
        removed: [{ u: "b", v: "c", w: null }],
      },
    });
    const tree = state.tree!;
    expect(tree.epoch).toBe(2);
    const byPair = new Map(tree.edges.map((e) => [`${e.u}|${e.v}`, e]));
    expect(byPair.get("a|c")!.in_tree).toBe(true);
    expect(byPair.get("a|c")!.w).toBe(15);
    expect(byPair.get("b|c")!.in_tree).toBe(false);
  });
});

describe("session replay", () => {
  it("replaying a recorded event stream reproduces the same view state", () => {
    const events: StreamEvent[] = [
      registryEvent("ServiceAdded", "st-1"),
      { type: "data", payload: { values: [{ farm: "f", cluster: "c",
        node: "n", param: "p", time: 1, value: 2 }] } },
      { type: "alert", payload: { target: "r1", reason: "restart failed twice",
        attempts: [1, 2], at: 3 } },
      registryEvent("ServiceRemoved", "st-1"),
    ];
    const a = replay(structuredClone(events));
    const b = replay(structuredClone(events));
    expect(visibleServices(a)).toEqual(visibleServices(b));
    expect([...a.live.entries()]).toEqual([...b.live.entries()]);
    expect(a.alerts).toEqual(b.alerts);
    expect(a.eventsSeen).toBe(b.eventsSeen);
  });
});
