import { describe, expect, it } from "vitest";

import { DEFAULT_PARTICLE_RANGE, emitterParams, steadyStateCount } from "../src/particles.js";

describe("particle mapping", () => {
  it("normalized 1 vs 0 gives 10x spawn rate and 6x lifetime at defaults", () => {
    const low = emitterParams(0);
    const high = emitterParams(1);
    expect(high.spawnRate / low.spawnRate).toBeCloseTo(10);
    expect(high.lifetime / low.lifetime).toBeCloseTo(6);
    expect(low.spawnRate).toBe(DEFAULT_PARTICLE_RANGE.minRate);
    expect(high.lifetime).toBe(DEFAULT_PARTICLE_RANGE.maxLifetime);
  });

  it("is linear in the normalized value", () => {
    const mid = emitterParams(0.5);
    expect(mid.spawnRate).toBeCloseTo((1 + 10) / 2);
    expect(mid.lifetime).toBeCloseTo((0.5 + 3) / 2);
  });

  it("uniform values give uniform steady-state density", () => {
    const a = steadyStateCount(emitterParams(0.4));
    const b = steadyStateCount(emitterParams(0.4));
    expect(a).toBe(b);
  });

  it("higher values are measurably denser in steady state", () => {
    expect(steadyStateCount(emitterParams(0.9))).toBeGreaterThan(
      steadyStateCount(emitterParams(0.2)),
    );
    // endpoints: 60x density ratio at defaults
    expect(
      steadyStateCount(emitterParams(1)) / steadyStateCount(emitterParams(0)),
    ).toBeCloseTo(60);
  });

  it("clamps out-of-range inputs", () => {
    expect(emitterParams(-0.5)).toEqual(emitterParams(0));
    expect(emitterParams(1.5)).toEqual(emitterParams(1));
  });
});
