import { writeFileSync } from "fs";

import { formatBeta, parseBeta, readCsv, requireColumns } from "./csv";
import { rewardSeries, smooth } from "./stats";
import * as svg from "./svg";

export type FigureKind = "reward-curve" | "lambda-vs-beta" | "td-vs-beta";

export interface FigureSpec {
  kind: FigureKind;
  input: string;          // rewards CSV (reward-curve) or summary CSV
  output: string;
  smoothing?: number;     // moving-average window over episodes
  rewardColumn?: "reward_norm" | "reward_raw";
}

/** Render one figure to a deterministic SVG file. The input CSVs are never
 * modified; re-rendering the same inputs writes identical bytes. */
export function render(spec: FigureSpec): string {
  let content: string;
  switch (spec.kind) {
    case "reward-curve":
      content = rewardCurve(spec);
      break;
    case "lambda-vs-beta":
      content = summaryCurve(spec, "avg_lambda", "average trust coefficient");
      break;
    case "td-vs-beta":
      content = summaryCurve(spec, "avg_abs_td", "average |TD error|");
      break;
    default:
      throw new Error(`unknown figure kind '${(spec as FigureSpec).kind}'`);
  }
  writeFileSync(spec.output, content, "utf-8");
  return spec.output;
}

function plotFrame() {
  const x0 = svg.MARGIN.left;
  const x1 = svg.WIDTH - svg.MARGIN.right;
  const y0 = svg.HEIGHT - svg.MARGIN.bottom;
  const y1 = svg.MARGIN.top;
  return { x0, x1, y0, y1 };
}

function rewardCurve(spec: FigureSpec): string {
  const rows = readCsv(spec.input);
  const column = spec.rewardColumn ?? "reward_norm";
  requireColumns(rows, ["beta", "seed", "episode", column], spec.input);
  const series = rewardSeries(rows.map((r) => ({
    beta: parseBeta(r.beta),
    episode: Number(r.episode),
    value: Number(r[column]),
  })));
  const window = spec.smoothing ?? 1;
  const frame = plotFrame();

  let loVal = Infinity;
  let hiVal = -Infinity;
  let loEp = Infinity;
  let hiEp = -Infinity;
  const prepared = series.map((s) => {
    const mean = smooth(s.mean, window);
    const sd = smooth(s.sd, window);
    const lo = mean.map((m, i) => m - sd[i]);
    const hi = mean.map((m, i) => m + sd[i]);
    loVal = Math.min(loVal, ...lo);
    hiVal = Math.max(hiVal, ...hi);
    loEp = Math.min(loEp, ...s.episodes);
    hiEp = Math.max(hiEp, ...s.episodes);
    return { ...s, mean, lo, hi };
  });
  const pad = (hiVal - loVal || 1) * 0.05;
  const x = svg.linearScale([loEp, hiEp], [frame.x0, frame.x1]);
  const y = svg.linearScale([loVal - pad, hiVal + pad], [frame.y0, frame.y1]);

  const doc = svg.open("episode reward (mean and one sd across seeds)");
  svg.axes(doc,
    svg.niceTicks(loEp, hiEp).map((v) => ({ v, label: String(v) })),
    svg.niceTicks(loVal - pad, hiVal + pad).map((v) => ({ v, label: svg.fmt(v) })),
    x, y, "episode", column);
  prepared.forEach((s, i) => {
    const color = svg.PALETTE[i % svg.PALETTE.length];
    const xs = s.episodes.map(x);
    doc.parts.push(`<path d="${svg.bandPath(xs, s.lo.map(y), s.hi.map(y))}" fill="${color}" opacity="0.18"/>`);
    doc.parts.push(`<polyline points="${svg.polyline(xs, s.mean.map(y))}" fill="none" stroke="${color}" stroke-width="1.8"/>`);
  });
  svg.legend(doc, prepared.map((s, i) => ({
    label: `beta=${formatBeta(s.beta)}`,
    color: svg.PALETTE[i % svg.PALETTE.length],
  })));
  return svg.close(doc);
}

function summaryCurve(spec: FigureSpec, column: string, yLabel: string): string {
  const rows = readCsv(spec.input);
  requireColumns(rows, ["beta", column], spec.input);
  const entries = rows
    .map((r) => ({ beta: parseBeta(r.beta), value: Number(r[column]) }))
    .sort((a, b) => a.beta - b.beta);
  const frame = plotFrame();
  // Category positions keep the grid order 0, 0.1, 1, 10, inf left to right.
  const x = svg.linearScale([0, Math.max(entries.length - 1, 1)],
    [frame.x0 + 30, frame.x1 - 30]);
  const vals = entries.map((e) => e.value);
  const lo = Math.min(...vals);
  const hi = Math.max(...vals);
  const pad = (hi - lo || 1) * 0.08;
  const y = svg.linearScale([lo - pad, hi + pad], [frame.y0, frame.y1]);

  const doc = svg.open(yLabel + " by tuning parameter");
  svg.axes(doc,
    entries.map((e, i) => ({ v: i, label: formatBeta(e.beta) })),
    svg.niceTicks(lo - pad, hi + pad).map((v) => ({ v, label: svg.fmt(v) })),
    x, y, "beta", yLabel);
  const xs = entries.map((_, i) => x(i));
  const ys = vals.map(y);
  doc.parts.push(`<polyline points="${svg.polyline(xs, ys)}" fill="none" stroke="${svg.PALETTE[0]}" stroke-width="2"/>`);
  entries.forEach((e, i) => {
    doc.parts.push(`<circle cx="${svg.fmt(xs[i])}" cy="${svg.fmt(ys[i])}" r="3.5" fill="${svg.PALETTE[0]}"/>`);
  });
  return svg.close(doc);
}
