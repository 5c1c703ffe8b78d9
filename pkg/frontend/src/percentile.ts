import type { FeatureTable } from "./types.js";

/**
 * Indices visible at threshold q: percentile rank >= q.
 *
 * This mirrors the pipeline's percentile_threshold exactly; the ranks are
 * read from the CSV, never recomputed, so the two sides cannot drift.
 */
export function visibleIndices(table: FeatureTable, q: number): Set<number> {
  if (q < 0 || q > 100) {
    throw new Error(`threshold out of [0, 100]: ${q}`);
  }
  const out = new Set<number>();
  for (const [index, row] of table) {
    if (row.percentile >= q) out.add(index);
  }
  return out;
}

/** Value range over the visible instances, for full-colormap rescaling. */
export function visibleValueRange(
  table: FeatureTable,
  visible: Set<number>,
): { min: number; max: number } {
  let min = Infinity;
  let max = -Infinity;
  for (const index of visible) {
    const v = table.get(index)!.value;
    if (v < min) min = v;
    if (v > max) max = v;
  }
  return { min, max };
}
