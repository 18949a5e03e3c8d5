/**
 * Minimal CSV reader for the estimator outputs.
 *
 * The files are plain comma-separated numeric tables written by the runner
 * (no quoting, full-precision floats, "inf"/"-inf"/"nan" spelled out, empty
 * cells allowed in path dumps). Schema checks fail loudly and report every
 * missing column at once.
 */

export interface Table {
  header: string[];
  /** column name -> numeric values, row-aligned */
  columns: Map<string, number[]>;
  rowCount: number;
}

function parseCell(cell: string): number {
  const c = cell.trim();
  if (c === "") return NaN;
  if (c === "inf") return Infinity;
  if (c === "-inf") return -Infinity;
  if (c === "nan" || c === "-nan") return NaN;
  return Number(c);
}

export function parseCsv(text: string): Table {
  const lines = text.split(/\r?\n/).filter((l) => l.trim() !== "");
  if (lines.length === 0) {
    throw new Error("empty CSV: no header row");
  }
  const header = lines[0].split(",").map((h) => h.trim());
  const columns = new Map<string, number[]>(header.map((h) => [h, []]));
  for (let i = 1; i < lines.length; i++) {
    const cells = lines[i].split(",");
    if (cells.length !== header.length) {
      throw new Error(`row ${i} has ${cells.length} cells, header has ${header.length}`);
    }
    for (let j = 0; j < header.length; j++) {
      columns.get(header[j])!.push(parseCell(cells[j]));
    }
  }
  const rowCount = lines.length - 1;
  if (rowCount === 0) {
    throw new Error("empty CSV: header only, no data rows");
  }
  return { header, columns, rowCount };
}

export function requireColumns(table: Table, names: string[]): void {
  const missing = names.filter((n) => !table.columns.has(n));
  if (missing.length > 0) {
    throw new Error(`CSV schema mismatch: missing columns ${missing.join(", ")}`);
  }
}

export function column(table: Table, name: string): number[] {
  requireColumns(table, [name]);
  return table.columns.get(name)!;
}
