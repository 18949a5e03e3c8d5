/**
 * The three figure kinds built from runner outputs:
 *
 * - score-panel: one log-density dot per populated bin plus a short segment
 *   through it whose slope is the estimated score, so correct estimates make
 *   the segments follow the dots' local trend;
 * - deviation-hist: histogram of per-path linear-response deviations with a
 *   zero reference line;
 * - trajectory: two chosen state coordinates of one path over time.
 *
 * Empty inputs and missing columns are errors; bins without paths are
 * skipped, never invented.
 */

import { column, parseCsv, requireColumns, Table } from "./csv.js";
import { axes, fmt, linearScale, padDomain, plotArea, Scale, svgDocument } from "./svg.js";

export type FigureKind = "score-panel" | "deviation-hist" | "trajectory";

export interface TrajectoryOptions {
  /** 1-based state coordinates to plot (default first two) */
  coords?: [number, number];
}

function makeScales(
  xDomain: [number, number],
  yDomain: [number, number],
): { x: Scale; y: Scale } {
  const area = plotArea();
  return {
    x: linearScale(xDomain, area.x),
    y: linearScale(yDomain, area.y),
  };
}

export function renderScorePanel(csvText: string): string {
  const table = parseCsv(csvText);
  requireColumns(table, ["bin_index", "bin_center", "count", "log_density", "mean_nu_1", "se_nu_1"]);
  const centers = column(table, "bin_center");
  const counts = column(table, "count");
  const logDensity = column(table, "log_density");
  const slopes = column(table, "mean_nu_1");
  const populated: number[] = [];
  for (let i = 0; i < table.rowCount; i++) {
    if (counts[i] > 0 && isFinite(logDensity[i]) && isFinite(slopes[i])) populated.push(i);
  }
  if (populated.length === 0) {
    throw new Error("score panel: no populated bins to draw");
  }
  const width =
    centers.length >= 2
      ? Math.min(...centers.slice(1).map((c, i) => Math.abs(c - centers[i])))
      : 1;
  const half = width / 3;
  let yLo = Infinity;
  let yHi = -Infinity;
  for (const i of populated) {
    const dy = Math.abs(slopes[i]) * half;
    yLo = Math.min(yLo, logDensity[i] - dy);
    yHi = Math.max(yHi, logDensity[i] + dy);
  }
  const xDomain = padDomain(Math.min(...centers) - width / 2, Math.max(...centers) + width / 2);
  const { x, y } = makeScales(xDomain, padDomain(yLo, yHi));
  const parts: string[] = [axes(x, y, "terminal state", "log density / score segments")];
  for (const i of populated) {
    const cx = centers[i];
    const ld = logDensity[i];
    const s = slopes[i];
    parts.push(
      `<line class="score-segment" x1="${fmt(x(cx - half))}" y1="${fmt(y(ld - s * half))}" ` +
        `x2="${fmt(x(cx + half))}" y2="${fmt(y(ld + s * half))}" stroke="#c0392b" stroke-width="2"/>`,
    );
    parts.push(
      `<circle class="density-dot" cx="${fmt(x(cx))}" cy="${fmt(y(ld))}" r="3.5" fill="#2c3e50"/>`,
    );
  }
  return svgDocument(parts.join("\n"), "log density and score segments per bin");
}

export function renderDeviationHist(csvText: string, nBins = 40): string {
  const table = parseCsv(csvText);
  requireColumns(table, ["deviation"]);
  const devs = column(table, "deviation").filter((v) => isFinite(v));
  if (devs.length === 0) {
    throw new Error("deviation histogram: no finite deviations");
  }
  const lo = Math.min(...devs, 0);
  const hi = Math.max(...devs, 0);
  const [dLo, dHi] = padDomain(lo, hi, 0.02);
  const binWidth = (dHi - dLo) / nBins;
  const counts = new Array<number>(nBins).fill(0);
  for (const v of devs) {
    const idx = Math.min(Math.floor((v - dLo) / binWidth), nBins - 1);
    counts[idx]++;
  }
  const { x, y } = makeScales([dLo, dHi], padDomain(0, Math.max(...counts), 0.05));
  const parts: string[] = [axes(x, y, "deviation", "paths")];
  for (let i = 0; i < nBins; i++) {
    if (counts[i] === 0) continue;
    const x0 = x(dLo + i * binWidth);
    const x1 = x(dLo + (i + 1) * binWidth);
    const yTop = y(counts[i]);
    const yBase = y(0);
    parts.push(
      `<rect class="hist-bar" x="${fmt(x0)}" y="${fmt(yTop)}" width="${fmt(x1 - x0)}" ` +
        `height="${fmt(yBase - yTop)}" fill="#5e81ac" stroke="white" stroke-width="0.5"/>`,
    );
  }
  parts.push(
    `<line class="zero-line" x1="${fmt(x(0))}" y1="${fmt(y(y.domain[0]))}" ` +
      `x2="${fmt(x(0))}" y2="${fmt(y(y.domain[1]))}" stroke="#2d2d2d" stroke-dasharray="5 3"/>`,
  );
  return svgDocument(parts.join("\n"), "linear-response deviations (zero-mean reference)");
}

function pickPath(table: Table): number[] {
  const ids = column(table, "path_id");
  const first = ids[0];
  const rows: number[] = [];
  for (let i = 0; i < table.rowCount; i++) if (ids[i] === first) rows.push(i);
  return rows;
}

export function renderTrajectory(csvText: string, options: TrajectoryOptions = {}): string {
  const table = parseCsv(csvText);
  const [c1, c2] = options.coords ?? [1, 2];
  const names = [`x_${c1}`, `x_${c2}`];
  requireColumns(table, ["path_id", "n", ...names]);
  const rows = pickPath(table);
  if (rows.length < 2) {
    throw new Error("trajectory: need at least two recorded steps");
  }
  const steps = column(table, "n");
  const a = column(table, names[0]);
  const b = column(table, names[1]);
  rows.sort((i, j) => steps[i] - steps[j]);
  const values = rows.flatMap((i) => [a[i], b[i]]).filter((v) => isFinite(v));
  const { x, y } = makeScales(
    padDomain(Math.min(...rows.map((i) => steps[i])), Math.max(...rows.map((i) => steps[i])), 0.02),
    padDomain(Math.min(...values), Math.max(...values)),
  );
  const line = (vals: number[], cls: string, color: string) => {
    const pts = rows.map((i) => `${fmt(x(steps[i]))},${fmt(y(vals[i]))}`).join(" ");
    return `<polyline class="${cls}" points="${pts}" fill="none" stroke="${color}" stroke-width="1.5"/>`;
  };
  const parts = [
    axes(x, y, "step", "state coordinates"),
    line(a, "traj-a", "#2c7fb8"),
    line(b, "traj-b", "#d95f0e"),
    `<text x="${plotArea().x[1] - 8}" y="${plotArea().y[1] + 16}" font-size="12" text-anchor="end" fill="#2c7fb8">${names[0]}</text>`,
    `<text x="${plotArea().x[1] - 8}" y="${plotArea().y[1] + 32}" font-size="12" text-anchor="end" fill="#d95f0e">${names[1]}</text>`,
  ];
  return svgDocument(parts.join("\n"), `trajectory of ${names[0]}, ${names[1]}`);
}

export function render(kind: FigureKind, csvText: string, options: TrajectoryOptions = {}): string {
  switch (kind) {
    case "score-panel":
      return renderScorePanel(csvText);
    case "deviation-hist":
      return renderDeviationHist(csvText);
    case "trajectory":
      return renderTrajectory(csvText, options);
    default:
      throw new Error(`unknown figure kind '${kind}'`);
  }
}
