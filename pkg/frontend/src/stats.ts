/** Mean and population standard deviation (matching the analysis side). */
export function meanSd(values: number[]): { mean: number; sd: number } {
  if (values.length === 0) {
    throw new Error("cannot aggregate an empty series");
  }
  const mean = values.reduce((a, b) => a + b, 0) / values.length;
  const varSum = values.reduce((a, b) => a + (b - mean) * (b - mean), 0);
  return { mean, sd: Math.sqrt(varSum / values.length) };
}

/** Centered moving average; window 1 returns the input unchanged. */
export function smooth(values: number[], window: number): number[] {
  if (window <= 1) return values.slice();
  const half = Math.floor(window / 2);
  return values.map((_, i) => {
    const lo = Math.max(0, i - half);
    const hi = Math.min(values.length, i + half + 1);
    let s = 0;
    for (let k = lo; k < hi; k++) s += values[k];
    return s / (hi - lo);
  });
}

export interface Series {
  beta: number;
  episodes: number[];
  mean: number[];
  sd: number[];
}

/** Group reward rows into one per-beta series of across-seed mean and sd. */
export function rewardSeries(
  rows: { beta: number; episode: number; value: number }[],
): Series[] {
  const byBeta = new Map<number, Map<number, number[]>>();
  for (const r of rows) {
    if (!byBeta.has(r.beta)) byBeta.set(r.beta, new Map());
    const byEp = byBeta.get(r.beta)!;
    if (!byEp.has(r.episode)) byEp.set(r.episode, []);
    byEp.get(r.episode)!.push(r.value);
  }
  const betas = [...byBeta.keys()].sort((a, b) => a - b);
  return betas.map((beta) => {
    const byEp = byBeta.get(beta)!;
    const episodes = [...byEp.keys()].sort((a, b) => a - b);
    const mean: number[] = [];
    const sd: number[] = [];
    for (const ep of episodes) {
      const { mean: m, sd: s } = meanSd(byEp.get(ep)!);
      mean.push(m);
      sd.push(s);
    }
    return { beta, episodes, mean, sd };
  });
}
