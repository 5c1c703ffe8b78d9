/**
 * Detail panel shown when a feature sphere is grabbed: raw value,
 * normalized value, feature name, and the patch image fetched by instance
 * index. The image resource is registered on open and released on close so
 * texture memory returns to baseline.
 */

import type { Disposable, ResourceRegistry } from "./resources.js";
import type { FeatureRow } from "./types.js";

export type ImageLoader = (url: string) => Promise<Disposable>;

export interface PanelContent {
  featureName: string;
  index: number;
  value: number;
  normalized: number;
  tumorId: string | null;
  imageUrl: string;
}

export function patchImageUrl(patchDir: string, index: number): string {
  return `${patchDir.replace(/\/$/, "")}/${index}.png`;
}

export class PatchPanel {
  private registry: ResourceRegistry;
  private loader: ImageLoader;
  private currentKey: string | null = null;
  content: PanelContent | null = null;
  loadError: string | null = null;

  constructor(registry: ResourceRegistry, loader: ImageLoader) {
    this.registry = registry;
    this.loader = loader;
  }

  async open(featureName: string, row: FeatureRow, patchDir: string): Promise<PanelContent> {
    this.close();
    const imageUrl = patchImageUrl(patchDir, row.index);
    this.content = {
      featureName,
      index: row.index,
      value: row.value,
      normalized: row.normalized,
      tumorId: row.tumorId,
      imageUrl,
    };
    this.loadError = null;
    try {
      const resource = await this.loader(imageUrl);
      this.currentKey = imageUrl;
      this.registry.acquire(imageUrl, resource);
    } catch (err) {
      this.loadError = String(err); // placeholder with retry stays up
    }
    return this.content;
  }

  async retry(): Promise<void> {
    if (!this.content || !this.loadError) return;
    try {
      const resource = await this.loader(this.content.imageUrl);
      this.currentKey = this.content.imageUrl;
      this.registry.acquire(this.content.imageUrl, resource);
      this.loadError = null;
    } catch (err) {
      this.loadError = String(err);
    }
  }

  close(): void {
    if (this.currentKey) {
      this.registry.release(this.currentKey);
      this.currentKey = null;
    }
    this.content = null;
    this.loadError = null;
  }

  get isOpen(): boolean {
    return this.content !== null;
  }
}
