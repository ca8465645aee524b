import { describe, expect, it } from "vitest";

import { buildChart, strokeSegments } from "../src/charts.js";
import type { SeriesBin } from "../src/api.js";

const bin = (t0: number, mean: number, lo: number, hi: number): SeriesBin => ({
  t_start: t0, t_end: t0 + 60_000, mean, min: lo, max: hi, count: 10,
});

describe("chart geometry", () => {
  it("renders a mean line plus a min/max band from bins", () => {
    const model = buildChart({
      bins: [bin(0, 1, 0.5, 1.5), bin(60_000, 2, 1.0, 3.0)],
      tail: [], width: 640, height: 260,
    });
    expect(model.linePath.startsWith("M")).toBe(true);
    expect(model.bandPath.startsWith("M")).toBe(true);
    expect(model.bandPath.endsWith("Z")).toBe(true);
    expect(model.vmin).toBe(0.5);
    expect(model.vmax).toBe(3.0);
  });

  it("live tail extends the same line", () => {
    const withTail = buildChart({
      bins: [bin(0, 1, 0.5, 1.5)],
      tail: [[70_000, 2], [80_000, 2.5]],
      width: 640, height: 260,
    });
    expect(strokeSegments(withTail.linePath)).toBe(1);
    expect(withTail.t1).toBe(80_000);
  });

  it("a gap marker breaks the stroke", () => {
    const model = buildChart({
      bins: [],
      tail: [[0, 1], [1_000, 2], [2_000, null], [3_000, 3], [4_000, 4]],
      width: 640, height: 260,
    });
    expect(strokeSegments(model.linePath)).toBe(2);
  });

  it("empty input renders an empty model, not NaN paths", () => {
    const model = buildChart({ bins: [], tail: [], width: 640, height: 260 });
    expect(model.linePath).toBe("");
    expect(model.bandPath).toBe("");
  });

  it("flat series still gets a non-degenerate value domain", () => {
    const model = buildChart({
      bins: [], tail: [[0, 7], [1_000, 7]], width: 640, height: 260,
    });
    expect(model.vmax).toBeGreaterThan(model.vmin);
    expect(model.linePath).not.toContain("NaN");
  });

  it("ticks are inside the frame and labeled", () => {
    const model = buildChart({
      bins: [bin(0, 1, 0, 2)], tail: [], width: 640, height: 260,
    });
    for (const t of model.xTicks) {
      expect(t.x).toBeGreaterThanOrEqual(0);
      expect(t.x).toBeLessThanOrEqual(640);
      expect(t.label).toMatch(/^\d{2}:\d{2}:\d{2}$/);
    }
    expect(model.yTicks).toHaveLength(3);
  });
});
