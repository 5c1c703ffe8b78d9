// Criterion: the viewer's visible-index set must equal the pipeline's
// percentile_threshold output exactly; the fixtures (CSV + expected sets)
// were generated by the pipeline itself.

import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { parseFeatureCsv } from "../src/csv.js";
import { visibleIndices, visibleValueRange } from "../src/percentile.js";

const FIXTURES = join(dirname(fileURLToPath(import.meta.url)), "fixtures");

function fixture(name: string): string {
  return readFileSync(join(FIXTURES, name), "utf-8");
}

describe("threshold equivalence with the pipeline", () => {
  const golden = parseFeatureCsv(fixture("golden.csv"));
  const goldenExpected = JSON.parse(fixture("golden_visible.json")) as Record<string, number[]>;
  const thousand = parseFeatureCsv(fixture("thousand.csv"));
  const thousandExpected = JSON.parse(fixture("thousand_visible.json")) as Record<
    string,
    number[]
  >;

  for (const q of [0, 50, 80, 95]) {
    it(`golden table matches pipeline exactly at q=${q}`, () => {
      const got = [...visibleIndices(golden, q)].sort((a, b) => a - b);
      expect(got).toEqual(goldenExpected[String(q)]);
    });

    it(`thousand-value table matches pipeline exactly at q=${q}`, () => {
      const got = [...visibleIndices(thousand, q)].sort((a, b) => a - b);
      expect(got).toEqual(thousandExpected[String(q)]);
    });
  }

  it("q=80 on 1000 distinct values shows ~20% (exactly 200)", () => {
    expect(visibleIndices(thousand, 80).size).toBe(200);
  });

  it("q=0 shows everything", () => {
    expect(visibleIndices(golden, 0).size).toBe(golden.size);
  });

  it("nesting: visible(90) is a subset of visible(50)", () => {
    const v90 = visibleIndices(golden, 90);
    const v50 = visibleIndices(golden, 50);
    for (const index of v90) expect(v50.has(index)).toBe(true);
  });

  it("rejects thresholds outside [0, 100]", () => {
    expect(() => visibleIndices(golden, -1)).toThrow();
    expect(() => visibleIndices(golden, 101)).toThrow();
  });

  it("visible value range spans min/max of the visible set only", () => {
    const visible = visibleIndices(thousand, 80);
    const { min, max } = visibleValueRange(thousand, visible);
    const values = [...visible].map((i) => thousand.get(i)!.value);
    expect(min).toBe(Math.min(...values));
    expect(max).toBe(Math.max(...values));
  });
});

describe("feature CSV parsing", () => {
  it("preserves tumor membership", () => {
    const golden = parseFeatureCsv(fixture("golden.csv"));
    const withTumor = [...golden.values()].filter((r) => r.tumorId !== null);
    expect(withTumor.map((r) => r.index).sort((a, b) => a - b)).toEqual([3, 11]);
    expect(new Set(withTumor.map((r) => r.tumorId))).toEqual(new Set(["1", "2"]));
  });

  it("rejects malformed headers", () => {
    expect(() => parseFeatureCsv("a,b,c\n1,2,3\n")).toThrow(/header/);
  });

  it("rejects duplicate indices", () => {
    const text =
      "index,x,y,z,value,normalized,percentile,tumor_id\n" +
      "1,0,0,0,1,0,50,\n1,0,0,0,2,1,50,\n";
    expect(() => parseFeatureCsv(text)).toThrow(/duplicate/);
  });
});
