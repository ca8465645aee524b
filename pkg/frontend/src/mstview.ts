/**
 * Overlay graph geometry and edge styling. A TreeUpdate restyles exactly
 * the edges in its diff; everything else keeps its class, which is what
 * makes the animation honest (and testable).
 */
import type { MstPayload, TreeUpdateEvent } from "./api.js";

export interface NodePos {
  id: string;
  x: number;
  y: number;
}

export type EdgeClass = "tree" | "idle" | "added" | "removed" | "unusable";

export interface EdgeView {
  u: string;
  v: string;
  w: number | null;
  cls: EdgeClass;
  tooltip: string;
}

export function circularLayout(
  vertices: string[],
  width: number,
  height: number,
): Map<string, NodePos> {
  const out = new Map<string, NodePos>();
  const cx = width / 2;
  const cy = height / 2;
  const r = Math.max(Math.min(width, height) / 2 - 40, 10);
  const sorted = [...vertices].sort();
  sorted.forEach((id, i) => {
    const angle = (2 * Math.PI * i) / Math.max(sorted.length, 1) - Math.PI / 2;
    out.set(id, {
      id,
      x: cx + r * Math.cos(angle),
      y: cy + r * Math.sin(angle),
    });
  });
  return out;
}

export function edgeKey(u: string, v: string): string {
  return u < v ? `${u}|${v}` : `${v}|${u}`;
}

/**
 * Style every edge of the payload. Pairs once seen but now absent from
 * the usable graph render dashed as unusable; a fresh TreeUpdate paints
 * its added/removed edges so only the diff restyles.
 */
export function edgeViews(
  payload: MstPayload,
  previousPairs: Set<string>,
  lastUpdate: TreeUpdateEvent | null,
): EdgeView[] {
  const added = new Set(
    (lastUpdate?.added ?? []).map((e) => edgeKey(e.u, e.v)),
  );
  const removed = new Set(
    (lastUpdate?.removed ?? []).map((e) => edgeKey(e.u, e.v)),
  );
  const present = new Set<string>();
  const out: EdgeView[] = [];
  for (const e of payload.edges) {
    const key = edgeKey(e.u, e.v);
    present.add(key);
    let cls: EdgeClass;
    if (added.has(key) && e.in_tree) {
      cls = "added";
    } else if (e.in_tree) {
      cls = "tree";
    } else if (removed.has(key)) {
      cls = "removed";
    } else {
      cls = "idle";
    }
    out.push({
      u: e.u,
      v: e.v,
      w: e.w,
      cls,
      tooltip: e.w === null ? `${e.u}–${e.v}: unusable`
        : `${e.u}–${e.v}: cost ${e.w.toFixed(1)}`,
    });
  }
  for (const key of previousPairs) {
    if (!present.has(key)) {
      const [u = "", v = ""] = key.split("|");
      out.push({ u, v, w: null, cls: "unusable",
                 tooltip: `${u}–${v}: unusable` });
    }
  }
  return out.sort((a, b) => edgeKey(a.u, a.v).localeCompare(edgeKey(b.u, b.v)));
}

/** Which edges changed class between two renders (the restyle set). */
export function restyledEdges(
  before: EdgeView[],
  after: EdgeView[],
): string[] {
  const prev = new Map(before.map((e) => [edgeKey(e.u, e.v), e.cls]));
  const out: string[] = [];
  for (const e of after) {
    const key = edgeKey(e.u, e.v);
    if (prev.get(key) !== e.cls) out.push(key);
  }
  for (const [key] of prev) {
    if (!after.some((e) => edgeKey(e.u, e.v) === key)) out.push(key);
  }
  return out.sort();
}
