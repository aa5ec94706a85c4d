// Minimal spatial math mirroring the server conventions:
// right-handed, +Y up, unit quaternions in (x, y, z, w) order.

export type Vec3 = { x: number; y: number; z: number };
export type Quat = { x: number; y: number; z: number; w: number };
export type Pose = { position: Vec3; rotation: Quat; scale: Vec3 };
export type RigidTransform = { rotation: Quat; translation: Vec3 };

export const v3 = (x = 0, y = 0, z = 0): Vec3 => ({ x, y, z });
export const qIdentity = (): Quat => ({ x: 0, y: 0, z: 0, w: 1 });

export function vAdd(a: Vec3, b: Vec3): Vec3 {
  return { x: a.x + b.x, y: a.y + b.y, z: a.z + b.z };
}

export function vSub(a: Vec3, b: Vec3): Vec3 {
  return { x: a.x - b.x, y: a.y - b.y, z: a.z - b.z };
}

export function vScale(a: Vec3, s: number): Vec3 {
  return { x: a.x * s, y: a.y * s, z: a.z * s };
}

export function vNorm(a: Vec3): number {
  return Math.hypot(a.x, a.y, a.z);
}

export function qMul(a: Quat, b: Quat): Quat {
  return {
    x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
    y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
    z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
  };
}

export function qConjugate(q: Quat): Quat {
  return { x: -q.x, y: -q.y, z: -q.z, w: q.w };
}

export function qRotate(q: Quat, v: Vec3): Vec3 {
  const qv = { x: q.x, y: q.y, z: q.z };
  const t = vScale(cross(qv, v), 2);
  return vAdd(vAdd(v, vScale(t, q.w)), cross(qv, t));
}

export function qFromAxisAngle(axis: Vec3, angleDeg: number): Quat {
  const n = vNorm(axis);
  const half = ((angleDeg * Math.PI) / 180) / 2;
  const s = Math.sin(half) / n;
  return { x: axis.x * s, y: axis.y * s, z: axis.z * s, w: Math.cos(half) };
}

export function rotationAngleDeg(a: Quat, b: Quat): number {
  const d = Math.abs(a.x * b.x + a.y * b.y + a.z * b.z + a.w * b.w);
  return (2 * Math.acos(Math.min(1, d)) * 180) / Math.PI;
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return {
    x: a.y * b.z - a.z * b.y,
    y: a.z * b.x - a.x * b.z,
    z: a.x * b.y - a.y * b.x,
  };
}

export function identityTransform(): RigidTransform {
  return { rotation: qIdentity(), translation: v3() };
}

export function applyToPoint(t: RigidTransform, p: Vec3): Vec3 {
  return vAdd(qRotate(t.rotation, p), t.translation);
}

export function applyToPose(t: RigidTransform, p: Pose): Pose {
  return {
    position: applyToPoint(t, p.position),
    rotation: qMul(t.rotation, p.rotation),
    scale: p.scale,
  };
}

export function defaultPose(): Pose {
  return { position: v3(), rotation: qIdentity(), scale: v3(1, 1, 1) };
}
