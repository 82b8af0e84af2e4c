#!/usr/bin/env node
import { FigureKind, render } from "./figures";

const KINDS: FigureKind[] = ["reward-curve", "lambda-vs-beta", "td-vs-beta"];
const ALIASES: Record<string, FigureKind> = {
  reward: "reward-curve",
  lambda: "lambda-vs-beta",
  td: "td-vs-beta",
};

function usage(): never {
  console.error(
    "usage: evsched-plots --kind <reward|lambda|td> --in <csv> --out <svg> [--smooth N] [--column reward_raw|reward_norm]");
  process.exit(2);
}

export function main(argv: string[]): number {
  const args = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || i + 1 >= argv.length) usage();
    args.set(argv[i].slice(2), argv[i + 1]);
  }
  const rawKind = args.get("kind");
  const input = args.get("in");
  const output = args.get("out");
  if (!rawKind || !input || !output) usage();
  const kind = (ALIASES[rawKind] ?? rawKind) as FigureKind;
  if (!KINDS.includes(kind)) {
    console.error(`unknown kind '${rawKind}'`);
    return 2;
  }
  try {
    render({
      kind,
      input,
      output,
      smoothing: args.has("smooth") ? Number(args.get("smooth")) : 1,
      rewardColumn: (args.get("column") as "reward_raw" | "reward_norm") ?? "reward_norm",
    });
  } catch (err) {
    console.error(String(err instanceof Error ? err.message : err));
    return 1;
  }
  console.log(`${kind} -> ${output}`);
  return 0;
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
