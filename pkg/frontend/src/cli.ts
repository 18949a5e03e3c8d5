/**
 * Command line: render --kind K --in CSV --out IMG [--coords i,j]
 *
 * Exits 0 on success; any parse/schema/render failure prints the error and
 * exits 1 without writing an image.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { FigureKind, render } from "./figures.js";

const KINDS: FigureKind[] = ["score-panel", "deviation-hist", "trajectory"];

interface Args {
  kind: FigureKind;
  input: string;
  output: string;
  coords?: [number, number];
}

export function parseArgs(argv: string[]): Args {
  if (argv[0] !== "render") {
    throw new Error(`unknown command '${argv[0] ?? ""}'; usage: render --kind K --in CSV --out IMG`);
  }
  const opts = new Map<string, string>();
  for (let i = 1; i < argv.length; i += 2) {
    const key = argv[i];
    const value = argv[i + 1];
    if (!key.startsWith("--") || value === undefined) {
      throw new Error(`malformed option '${key}'`);
    }
    opts.set(key.slice(2), value);
  }
  const kind = opts.get("kind") as FigureKind | undefined;
  const input = opts.get("in");
  const output = opts.get("out");
  if (!kind || !KINDS.includes(kind)) {
    throw new Error(`--kind must be one of ${KINDS.join(", ")}`);
  }
  if (!input || !output) {
    throw new Error("--in and --out are required");
  }
  const args: Args = { kind, input, output };
  const coords = opts.get("coords");
  if (coords) {
    const parts = coords.split(",").map((c) => Number.parseInt(c, 10));
    if (parts.length !== 2 || parts.some((p) => !Number.isInteger(p) || p < 1)) {
      throw new Error("--coords expects two 1-based integers, e.g. 1,2");
    }
    args.coords = [parts[0], parts[1]];
  }
  return args;
}

export function main(argv: string[]): number {
  let args: Args;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
  try {
    const text = readFileSync(args.input, "utf8");
    const svg = render(args.kind, text, { coords: args.coords });
    writeFileSync(args.output, svg);
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
  console.log(`wrote ${args.output}`);
  return 0;
}

const invokedDirectly =
  process.argv[1] !== undefined && import.meta.url === new URL(`file://${process.argv[1]}`).href;
if (invokedDirectly) {
  process.exit(main(process.argv.slice(2)));
}
