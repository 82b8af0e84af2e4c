import { mkdtempSync, readFileSync } from "fs";
import { tmpdir } from "os";
import { join } from "path";
import { describe, expect, it } from "vitest";

import { main } from "../src/cli";
import { render } from "../src/figures";
import { meanSd, rewardSeries, smooth } from "../src/stats";
import { parseBeta, parseCsv } from "../src/csv";

const FIXTURES = join(__dirname, "fixtures");
const REWARDS = join(FIXTURES, "rewards.csv");
const SUMMARY = join(FIXTURES, "summary.csv");

function tmp(): string {
  return mkdtempSync(join(tmpdir(), "plots-"));
}

function polylines(svg: string): string[][] {
  const out: string[][] = [];
  const re = /<polyline points="([^"]+)"/g;
  let m: RegExpExecArray | null;
  while ((m = re.exec(svg)) !== null) {
    out.push(m[1].split(" "));
  }
  return out;
}

describe("render", () => {
  it("produces all three figure kinds", () => {
    const dir = tmp();
    for (const [kind, input] of [
      ["reward-curve", REWARDS],
      ["lambda-vs-beta", SUMMARY],
      ["td-vs-beta", SUMMARY],
    ] as const) {
      const out = join(dir, `${kind}.svg`);
      render({ kind, input, output: out });
      const content = readFileSync(out, "utf-8");
      expect(content.startsWith("<svg")).toBe(true);
      expect(content.length).toBeGreaterThan(500);
      expect(content).toContain("</svg>");
    }
  });

  it("re-render is byte-identical and never touches the input", () => {
    const dir = tmp();
    const inputBefore = readFileSync(REWARDS);
    const out = join(dir, "r.svg");
    render({ kind: "reward-curve", input: REWARDS, output: out, smoothing: 3 });
    const first = readFileSync(out);
    render({ kind: "reward-curve", input: REWARDS, output: out, smoothing: 3 });
    const second = readFileSync(out);
    expect(second.equals(first)).toBe(true);
    expect(readFileSync(REWARDS).equals(inputBefore)).toBe(true);
  });

  it("renders the pure-baseline series flat", () => {
    const dir = tmp();
    const out = join(dir, "r.svg");
    render({ kind: "reward-curve", input: REWARDS, output: out });
    const svg = readFileSync(out, "utf-8");
    const lines = polylines(svg);
    // Series are sorted by beta, so the last one is the inf sentinel.
    expect(lines.length).toBe(3);
    const ys = lines[lines.length - 1].map((pt) => pt.split(",")[1]);
    expect(new Set(ys).size).toBe(1);
    // The learned-policy series is not flat.
    expect(new Set(lines[0].map((pt) => pt.split(",")[1])).size).toBeGreaterThan(1);
  });

  it("orders the summary x axis 0, 0.1, 1, 10, inf", () => {
    const dir = tmp();
    const out = join(dir, "l.svg");
    render({ kind: "lambda-vs-beta", input: SUMMARY, output: out });
    const svg = readFileSync(out, "utf-8");
    const labels = [...svg.matchAll(
      /text-anchor="middle" font-size="11">([^<]+)<\/text>/g,
    )].map((m) => m[1]);
    expect(labels).toEqual(["0", "0.1", "1", "10", "inf"]);
  });

  it("names missing columns", () => {
    expect(() =>
      render({ kind: "lambda-vs-beta", input: REWARDS, output: join(tmp(), "x.svg") }),
    ).toThrow(/avg_lambda/);
  });
});

describe("stats", () => {
  it("population sd", () => {
    const { mean, sd } = meanSd([-1, -3]);
    expect(mean).toBe(-2);
    expect(sd).toBe(1);
  });

  it("smoothing window", () => {
    expect(smooth([0, 3, 6], 3)).toEqual([1.5, 3, 4.5]);
    expect(smooth([1, 2], 1)).toEqual([1, 2]);
  });

  it("reward grouping across seeds", () => {
    const rows = [
      { beta: 1, episode: 0, value: -1 },
      { beta: 1, episode: 0, value: -3 },
      { beta: 0, episode: 0, value: -5 },
    ];
    const series = rewardSeries(rows);
    expect(series.map((s) => s.beta)).toEqual([0, 1]);
    expect(series[1].mean).toEqual([-2]);
    expect(series[1].sd).toEqual([1]);
  });

  it("beta parsing", () => {
    expect(parseBeta("inf")).toBe(Infinity);
    expect(parseBeta("0.1")).toBe(0.1);
    expect(() => parseBeta("wat")).toThrow();
  });

  it("csv shape errors", () => {
    expect(() => parseCsv("a,b\n1\n")).toThrow(/row 2/);
  });
});

describe("cli", () => {
  it("runs end to end", () => {
    const out = join(tmp(), "fig.svg");
    const code = main(["--kind", "reward", "--in", REWARDS, "--out", out]);
    expect(code).toBe(0);
    expect(readFileSync(out, "utf-8")).toContain("<svg");
  });

  it("rejects unknown kind", () => {
    expect(main(["--kind", "pie", "--in", REWARDS, "--out", "x.svg"])).toBe(2);
  });

  it("propagates render errors", () => {
    const code = main(["--kind", "lambda", "--in", REWARDS,
      "--out", join(tmp(), "x.svg")]);
    expect(code).toBe(1);
  });
});
