export { parseCsv, requireColumns, column, type Table } from "./csv.js";
export {
  render,
  renderDeviationHist,
  renderScorePanel,
  renderTrajectory,
  type FigureKind,
  type TrajectoryOptions,
} from "./figures.js";
export { main, parseArgs } from "./cli.js";
