/**
 * Particle emitter parameters per feature instance: spawn rate and lifetime
 * scale linearly with the normalized value, so high-value regions stay
 * visibly denser in steady state (density = rate * lifetime).
 */

export interface ParticleRange {
  minRate: number; // particles/s at normalized 0
  maxRate: number; // particles/s at normalized 1
  minLifetime: number; // s
  maxLifetime: number; // s
}

export const DEFAULT_PARTICLE_RANGE: ParticleRange = {
  minRate: 1,
  maxRate: 10,
  minLifetime: 0.5,
  maxLifetime: 3,
};

export interface EmitterParams {
  spawnRate: number;
  lifetime: number;
}

export function emitterParams(
  normalized: number,
  range: ParticleRange = DEFAULT_PARTICLE_RANGE,
): EmitterParams {
  const t = Math.min(Math.max(normalized, 0), 1);
  return {
    spawnRate: range.minRate + t * (range.maxRate - range.minRate),
    lifetime: range.minLifetime + t * (range.maxLifetime - range.minLifetime),
  };
}

/** Expected particles alive at equilibrium. */
export function steadyStateCount(params: EmitterParams): number {
  return params.spawnRate * params.lifetime;
}
