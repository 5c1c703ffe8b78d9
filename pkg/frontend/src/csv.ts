import type { ColormapTable, FeatureRow, FeatureTable } from "./types.js";

const FEATURE_HEADER = "index,x,y,z,value,normalized,percentile,tumor_id";

/** Parse a feature CSV into an index-keyed map (index is unique per table). */
export function parseFeatureCsv(text: string): FeatureTable {
  const lines = text.split("\n").filter((l) => l.length > 0);
  if (lines[0] !== FEATURE_HEADER) {
    throw new Error(`bad feature CSV header: ${lines[0]}`);
  }
  const table: FeatureTable = new Map();
  for (const line of lines.slice(1)) {
    const parts = line.split(",");
    if (parts.length !== 8) {
      throw new Error(`bad feature CSV row: ${line}`);
    }
    const row: FeatureRow = {
      index: Number(parts[0]),
      x: Number(parts[1]),
      y: Number(parts[2]),
      z: Number(parts[3]),
      value: Number(parts[4]),
      normalized: Number(parts[5]),
      percentile: Number(parts[6]),
      tumorId: parts[7] === "" ? null : parts[7],
    };
    if (!Number.isInteger(row.index) || table.has(row.index)) {
      throw new Error(`duplicate or invalid index: ${parts[0]}`);
    }
    table.set(row.index, row);
  }
  return table;
}

/** Parse colormaps.csv (name,index,r,g,b with 256 complete rows per name). */
export function parseColormapCsv(text: string): ColormapTable {
  const lines = text.split("\n").filter((l) => l.length > 0);
  if (lines[0] !== "name,index,r,g,b") {
    throw new Error(`bad colormap CSV header: ${lines[0]}`);
  }
  const raw = new Map<string, Array<[number, number, number, number]>>();
  for (const line of lines.slice(1)) {
    const [name, idx, r, g, b] = line.split(",");
    if (!raw.has(name)) raw.set(name, []);
    raw.get(name)!.push([Number(idx), Number(r), Number(g), Number(b)]);
  }
  const tables: ColormapTable = new Map();
  for (const [name, rows] of raw) {
    rows.sort((a, b) => a[0] - b[0]);
    if (rows.length !== 256 || rows.some(([i], k) => i !== k)) {
      throw new Error(`colormap ${name} is incomplete`);
    }
    const flat = new Uint8Array(256 * 3);
    rows.forEach(([, r, g, b], k) => {
      flat[3 * k] = r;
      flat[3 * k + 1] = g;
      flat[3 * k + 2] = b;
    });
    tables.set(name, flat);
  }
  return tables;
}
