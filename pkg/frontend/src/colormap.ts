/** Sample a 256-entry RGB table at t in [0, 1]; order-preserving in index. */
export function sampleColormap(table: Uint8Array, t: number): [number, number, number] {
  const clamped = Math.min(Math.max(t, 0), 1);
  const idx = Math.min(Math.floor(clamped * 256), 255);
  return [table[3 * idx], table[3 * idx + 1], table[3 * idx + 2]];
}

/**
 * Map a raw value onto [0, 1] across the visible range so the full colormap
 * stays in use after thresholding; constant ranges map to 1 (single color).
 */
export function rescaleToVisible(value: number, min: number, max: number): number {
  if (!(max > min)) return 1;
  return (value - min) / (max - min);
}
