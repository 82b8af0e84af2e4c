/** Deterministic SVG assembly: plain strings, fixed number formatting, no
 * timestamps, so re-rendering the same inputs is byte-identical. */

export const WIDTH = 720;
export const HEIGHT = 440;
export const MARGIN = { top: 28, right: 24, bottom: 46, left: 64 };

export const PALETTE = [
  "#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2",
];

export function linearScale(
  domain: [number, number],
  range: [number, number],
): (v: number) => number {
  const [d0, d1] = domain;
  const [r0, r1] = range;
  const span = d1 - d0 === 0 ? 1 : d1 - d0;
  return (v: number) => r0 + ((v - d0) / span) * (r1 - r0);
}

export function fmt(v: number): string {
  if (!Number.isFinite(v)) throw new Error("non-finite coordinate");
  return v.toFixed(3).replace(/\.?0+$/, "").replace(/^-0$/, "0");
}

export function polyline(xs: number[], ys: number[]): string {
  return xs.map((x, i) => `${fmt(x)},${fmt(ys[i])}`).join(" ");
}

export function bandPath(xs: number[], lo: number[], hi: number[]): string {
  const up = xs.map((x, i) => `${fmt(x)},${fmt(hi[i])}`);
  const down = xs
    .map((x, i) => `${fmt(x)},${fmt(lo[i])}`)
    .reverse();
  return `M${up.join(" L")} L${down.join(" L")} Z`;
}

export function niceTicks(lo: number, hi: number, count = 6): number[] {
  if (lo === hi) return [lo];
  const span = hi - lo;
  const step = Math.pow(10, Math.floor(Math.log10(span / count)));
  const err = (span / count) / step;
  const mult = err >= 7.5 ? 10 : err >= 3.5 ? 5 : err >= 1.5 ? 2 : 1;
  const s = step * mult;
  const start = Math.ceil(lo / s) * s;
  const ticks: number[] = [];
  for (let v = start; v <= hi + 1e-12; v += s) ticks.push(Number(v.toPrecision(12)));
  return ticks;
}

export interface SvgDoc {
  parts: string[];
}

export function open(title: string): SvgDoc {
  return {
    parts: [
      `<svg xmlns="http://www.w3.org/2000/svg" width="${WIDTH}" height="${HEIGHT}" viewBox="0 0 ${WIDTH} ${HEIGHT}" font-family="Helvetica, Arial, sans-serif">`,
      `<rect width="${WIDTH}" height="${HEIGHT}" fill="white"/>`,
      `<text x="${WIDTH / 2}" y="18" text-anchor="middle" font-size="14">${title}</text>`,
    ],
  };
}

export function axes(
  doc: SvgDoc,
  xTicks: { v: number; label: string }[],
  yTicks: { v: number; label: string }[],
  x: (v: number) => number,
  y: (v: number) => number,
  xLabel: string,
  yLabel: string,
): void {
  const x0 = MARGIN.left;
  const x1 = WIDTH - MARGIN.right;
  const y0 = HEIGHT - MARGIN.bottom;
  const y1 = MARGIN.top;
  doc.parts.push(`<line x1="${x0}" y1="${y0}" x2="${x1}" y2="${y0}" stroke="black"/>`);
  doc.parts.push(`<line x1="${x0}" y1="${y0}" x2="${x0}" y2="${y1}" stroke="black"/>`);
  for (const t of xTicks) {
    const px = x(t.v);
    doc.parts.push(`<line x1="${fmt(px)}" y1="${y0}" x2="${fmt(px)}" y2="${y0 + 5}" stroke="black"/>`);
    doc.parts.push(`<text x="${fmt(px)}" y="${y0 + 20}" text-anchor="middle" font-size="11">${t.label}</text>`);
  }
  for (const t of yTicks) {
    const py = y(t.v);
    doc.parts.push(`<line x1="${x0 - 5}" y1="${fmt(py)}" x2="${x0}" y2="${fmt(py)}" stroke="black"/>`);
    doc.parts.push(`<text x="${x0 - 9}" y="${fmt(py + 4)}" text-anchor="end" font-size="11">${t.label}</text>`);
  }
  doc.parts.push(`<text x="${(x0 + x1) / 2}" y="${HEIGHT - 10}" text-anchor="middle" font-size="12">${xLabel}</text>`);
  doc.parts.push(`<text transform="translate(16 ${(y0 + y1) / 2}) rotate(-90)" text-anchor="middle" font-size="12">${yLabel}</text>`);
}

export function legend(doc: SvgDoc, entries: { label: string; color: string }[]): void {
  const x = WIDTH - MARGIN.right - 110;
  let y = MARGIN.top + 8;
  for (const e of entries) {
    doc.parts.push(`<line x1="${x}" y1="${y}" x2="${x + 22}" y2="${y}" stroke="${e.color}" stroke-width="2"/>`);
    doc.parts.push(`<text x="${x + 28}" y="${y + 4}" font-size="11">${e.label}</text>`);
    y += 16;
  }
}

export function close(doc: SvgDoc): string {
  return doc.parts.join("\n") + "\n</svg>\n";
}
