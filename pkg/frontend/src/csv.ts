import { readFileSync } from "fs";

export type Row = Record<string, string>;

/** Parse a simple comma-separated file with a header row (no quoting; the
 * producer never emits quoted fields). */
export function parseCsv(text: string): Row[] {
  const lines = text.split("\n").filter((l) => l.length > 0);
  if (lines.length === 0) {
    throw new Error("empty CSV");
  }
  const header = lines[0].split(",");
  return lines.slice(1).map((line, i) => {
    const cells = line.split(",");
    if (cells.length !== header.length) {
      throw new Error(`row ${i + 2}: expected ${header.length} fields, got ${cells.length}`);
    }
    const row: Row = {};
    header.forEach((h, k) => (row[h] = cells[k]));
    return row;
  });
}

export function readCsv(path: string): Row[] {
  return parseCsv(readFileSync(path, "utf-8"));
}

export function requireColumns(rows: Row[], cols: string[], path: string): void {
  if (rows.length === 0) {
    throw new Error(`${path}: no data rows`);
  }
  for (const c of cols) {
    if (!(c in rows[0])) {
      throw new Error(`${path}: missing column '${c}'`);
    }
  }
}

/** Numeric parse that understands the 'inf' sentinel used for the
 * pure-baseline grid entry. */
export function parseBeta(text: string): number {
  if (text === "inf") return Infinity;
  const v = Number(text);
  if (Number.isNaN(v)) throw new Error(`bad beta value '${text}'`);
  return v;
}

export function formatBeta(beta: number): string {
  return Number.isFinite(beta) ? String(beta) : "inf";
}
