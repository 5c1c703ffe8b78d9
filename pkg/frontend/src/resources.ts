/**
 * Tracks disposable GPU-backed resources (patch textures). Detail panels
 * must release their textures on close so long sessions do not accumulate
 * texture memory; the live counter makes that testable.
 */

export interface Disposable {
  dispose(): void;
}

export class ResourceRegistry {
  private live = new Map<string, Disposable>();
  private peak = 0;

  acquire(key: string, resource: Disposable): void {
    const existing = this.live.get(key);
    if (existing) existing.dispose();
    this.live.set(key, resource);
    this.peak = Math.max(this.peak, this.live.size);
  }

  release(key: string): void {
    const resource = this.live.get(key);
    if (resource) {
      resource.dispose();
      this.live.delete(key);
    }
  }

  releaseAll(): void {
    for (const key of [...this.live.keys()]) this.release(key);
  }

  get liveCount(): number {
    return this.live.size;
  }

  get peakCount(): number {
    return this.peak;
  }
}
