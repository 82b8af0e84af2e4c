export { render, FigureSpec, FigureKind } from "./figures";
export { parseCsv, readCsv, parseBeta, formatBeta } from "./csv";
export { meanSd, smooth, rewardSeries } from "./stats";
