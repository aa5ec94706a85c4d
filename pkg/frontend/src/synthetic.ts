// Synthetic tag observations: the browser stand-in for pointing a camera
// at the fiducial. Noise mirrors the server's simulation model:
// sigma_eff = sigma * (1 + distanceScale * distance / tagSize).

import { Pose, qFromAxisAngle, qMul, v3, vAdd } from "./math";

export type NoiseSpec = {
  positionStdM: number;
  rotationStdDeg: number;
  distanceScale: number;
  seed: number;
};

export const ZERO_NOISE: NoiseSpec = {
  positionStdM: 0,
  rotationStdDeg: 0,
  distanceScale: 0,
  seed: 0,
};

export type TagObservationJson = {
  tagId: number;
  tagPose: ReturnType<typeof import("./protocol").poseToJson>;
  tagSizeMeters: number;
  observationDistance: number;
  timestamp: number;
};

// mulberry32: tiny deterministic PRNG, good enough for demo jitter.
function mulberry32(seed: number) {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function gaussian(rand: () => number): number {
  // Box-Muller with a guard against log(0).
  const u = Math.max(rand(), 1e-12);
  const v = rand();
  return Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v);
}

export function perturbTagPose(
  truePose: Pose,
  noise: NoiseSpec,
  distanceM: number,
  tagSizeM: number,
  draw = 0,
): Pose {
  const factor = 1 + noise.distanceScale * (distanceM / tagSizeM);
  const posStd = noise.positionStdM * factor;
  const rotStd = noise.rotationStdDeg * factor;
  if (posStd === 0 && rotStd === 0) return truePose;
  const rand = mulberry32(noise.seed * 0x9e3779b1 + draw);
  const offset = v3(
    gaussian(rand) * posStd,
    gaussian(rand) * posStd,
    gaussian(rand) * posStd,
  );
  let rotation = truePose.rotation;
  if (rotStd > 0) {
    const axis = v3(gaussian(rand), gaussian(rand), gaussian(rand));
    const angle = gaussian(rand) * rotStd;
    rotation = qMul(qFromAxisAngle(axis, angle), rotation);
    const n = Math.hypot(rotation.x, rotation.y, rotation.z, rotation.w);
    rotation = { x: rotation.x / n, y: rotation.y / n, z: rotation.z / n, w: rotation.w / n };
  }
  return {
    position: vAdd(truePose.position, offset),
    rotation,
    scale: truePose.scale,
  };
}
