/**
 * Chart geometry: series payloads in, SVG path strings out. No DOM here,
 * so every pixel decision is unit-testable.
 */
import type { SeriesBin } from "./api.js";

export interface ChartModel {
  linePath: string;
  bandPath: string; // min/max envelope polygon, empty when no bins
  t0: number;
  t1: number;
  vmin: number;
  vmax: number;
  xTicks: { x: number; label: string }[];
  yTicks: { y: number; label: string }[];
}

export interface ChartInput {
  bins: SeriesBin[];
  tail: [number, number | null][]; // live points, null value = gap
  width: number;
  height: number;
  padding?: number;
}

function fmtTime(t: number): string {
  const d = new Date(t);
  return `${String(d.getUTCHours()).padStart(2, "0")}:${String(
    d.getUTCMinutes(),
  ).padStart(2, "0")}:${String(d.getUTCSeconds()).padStart(2, "0")}`;
}

function fmtValue(v: number): string {
  if (Math.abs(v) >= 1000) return v.toFixed(0);
  if (Math.abs(v) >= 1) return v.toFixed(2);
  return v.toPrecision(3);
}

export function buildChart(input: ChartInput): ChartModel {
  const pad = input.padding ?? 30;
  const times: number[] = [];
  const values: number[] = [];
  for (const b of input.bins) {
    times.push(b.t_start, b.t_end);
    values.push(b.min, b.max);
  }
  for (const [t, v] of input.tail) {
    times.push(t);
    if (v !== null) values.push(v);
  }
  if (times.length === 0 || values.length === 0) {
    return { linePath: "", bandPath: "", t0: 0, t1: 1, vmin: 0, vmax: 1,
             xTicks: [], yTicks: [] };
  }
  const t0 = Math.min(...times);
  const t1 = Math.max(...times);
  let vmin = Math.min(...values);
  let vmax = Math.max(...values);
  if (vmin === vmax) {
    vmin -= 0.5;
    vmax += 0.5;
  }
  const spanT = Math.max(t1 - t0, 1);
  const spanV = vmax - vmin;
  const x = (t: number) =>
    pad + ((t - t0) / spanT) * (input.width - 2 * pad);
  const y = (v: number) =>
    input.height - pad - ((v - vmin) / spanV) * (input.height - 2 * pad);

  // envelope: min edge forward, max edge back
  let bandPath = "";
  if (input.bins.length > 0) {
    const fwd = input.bins.map(
      (b) => `${x((b.t_start + b.t_end) / 2).toFixed(1)},${y(b.min).toFixed(1)}`);
    const back = [...input.bins].reverse().map(
      (b) => `${x((b.t_start + b.t_end) / 2).toFixed(1)},${y(b.max).toFixed(1)}`);
    bandPath = `M${fwd.join("L")}L${back.join("L")}Z`;
  }

  // mean line over bins, then the live tail; gaps break the stroke
  const segments: string[] = [];
  let pen: "up" | "down" = "up";
  const draw = (px: number, py: number) => {
    segments.push(`${pen === "up" ? "M" : "L"}${px.toFixed(1)},${py.toFixed(1)}`);
    pen = "down";
  };
  for (const b of input.bins) {
    draw(x((b.t_start + b.t_end) / 2), y(b.mean));
  }
  for (const [t, v] of input.tail) {
    if (v === null) {
      pen = "up"; // gap marker: lift the pen
      continue;
    }
    draw(x(t), y(v));
  }

  const xTicks = [0, 0.5, 1].map((f) => ({
    x: pad + f * (input.width - 2 * pad),
    label: fmtTime(t0 + f * spanT),
  }));
  const yTicks = [0, 0.5, 1].map((f) => ({
    y: input.height - pad - f * (input.height - 2 * pad),
    label: fmtValue(vmin + f * spanV),
  }));
  return { linePath: segments.join(""), bandPath, t0, t1, vmin, vmax,
           xTicks, yTicks };
}

/** Count the pen lifts; n gaps produce n+1 stroke segments. */
export function strokeSegments(linePath: string): number {
  return (linePath.match(/M/g) ?? []).length;
}
