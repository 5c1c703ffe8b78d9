/** Fetch helpers for a served bundle; every loader fails loudly with the
 * offending URL so the error panel can name the file. */

import { parseColormapCsv, parseFeatureCsv } from "./csv.js";
import type { BundleManifest, ColormapTable, FeatureTable } from "./types.js";

async function fetchOk(url: string): Promise<Response> {
  const resp = await fetch(url);
  if (!resp.ok) throw new Error(`${url}: HTTP ${resp.status}`);
  return resp;
}

export class BundleClient {
  readonly baseUrl: string;

  constructor(baseUrl: string) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
  }

  url(ref: string): string {
    return `${this.baseUrl}/${ref}`;
  }

  async manifest(): Promise<BundleManifest> {
    const resp = await fetchOk(this.url("bundle.json"));
    return (await resp.json()) as BundleManifest;
  }

  async featureTable(ref: string): Promise<FeatureTable> {
    const resp = await fetchOk(this.url(ref));
    return parseFeatureCsv(await resp.text());
  }

  async colormaps(ref: string): Promise<ColormapTable> {
    const resp = await fetchOk(this.url(ref));
    return parseColormapCsv(await resp.text());
  }

  async binary(ref: string): Promise<ArrayBuffer> {
    const resp = await fetchOk(this.url(ref));
    return await resp.arrayBuffer();
  }
}

/** Feature name from a CSV ref like features/organ/glcm_energy.csv. */
export function featureNameFromRef(ref: string): string {
  const base = ref.split("/").pop() ?? ref;
  return base.replace(/\.csv$/, "");
}
