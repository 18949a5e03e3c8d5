import { describe, expect, it } from "vitest";
import { column, parseCsv, requireColumns } from "../src/csv.js";

describe("parseCsv", () => {
  it("reads numeric tables", () => {
    const t = parseCsv("a,b\n1,2.5\n-3e2,0.125\n");
    expect(t.rowCount).toBe(2);
    expect(column(t, "a")).toEqual([1, -300]);
    expect(column(t, "b")).toEqual([2.5, 0.125]);
  });

  it("understands inf, nan, and empty cells", () => {
    const t = parseCsv("v,w\n-inf,\ninf,nan\n");
    const v = column(t, "v");
    expect(v[0]).toBe(-Infinity);
    expect(v[1]).toBe(Infinity);
    expect(Number.isNaN(column(t, "w")[0])).toBe(true);
    expect(Number.isNaN(column(t, "w")[1])).toBe(true);
  });

  it("rejects empty input", () => {
    expect(() => parseCsv("")).toThrow(/empty CSV/);
    expect(() => parseCsv("a,b\n")).toThrow(/no data rows/);
  });

  it("rejects ragged rows", () => {
    expect(() => parseCsv("a,b\n1\n")).toThrow(/row 1/);
  });
});

describe("requireColumns", () => {
  it("lists every missing column at once", () => {
    const t = parseCsv("a,b\n1,2\n");
    expect(() => requireColumns(t, ["a", "x", "y"])).toThrow(/missing columns x, y/);
  });
});
