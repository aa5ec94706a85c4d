// 48-byte sync-record codec and the change-driven send policy.
// Wire layout (little-endian): u32 objectId | 3xf32 position |
// 4xf32 rotation (x,y,z,w) | 3xf32 scale | u32 events.

import { Pose, Quat, Vec3, rotationAngleDeg, vNorm, vSub } from "./math";

export const RECORD_SIZE = 48;

export const EVENT_GRABBED = 1 << 0;
export const EVENT_RELEASED = 1 << 1;
export const EVENT_DESTROYED = 1 << 2;
const RESERVED_MASK = ~(EVENT_GRABBED | EVENT_RELEASED | EVENT_DESTROYED) >>> 0;

export type SyncRecord = {
  objectId: number;
  position: Vec3;
  rotation: Quat;
  scale: Vec3;
  events: number;
};

export function recordFromPose(objectId: number, pose: Pose, events = 0): SyncRecord {
  return { objectId, position: pose.position, rotation: pose.rotation, scale: pose.scale, events };
}

export function encodeRecord(r: SyncRecord): Uint8Array {
  if ((r.events & RESERVED_MASK) !== 0) {
    throw new Error(`reserved event bits set: ${r.events}`);
  }
  const buf = new ArrayBuffer(RECORD_SIZE);
  const view = new DataView(buf);
  view.setUint32(0, r.objectId >>> 0, true);
  const floats = [
    r.position.x, r.position.y, r.position.z,
    r.rotation.x, r.rotation.y, r.rotation.z, r.rotation.w,
    r.scale.x, r.scale.y, r.scale.z,
  ];
  floats.forEach((f, i) => view.setFloat32(4 + 4 * i, f, true));
  view.setUint32(44, r.events >>> 0, true);
  return new Uint8Array(buf);
}

export function decodeRecord(bytes: Uint8Array): SyncRecord {
  if (bytes.length !== RECORD_SIZE) {
    throw new Error(`sync record must be ${RECORD_SIZE} bytes, got ${bytes.length}`);
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const f = (i: number) => view.getFloat32(4 + 4 * i, true);
  return {
    objectId: view.getUint32(0, true),
    position: { x: f(0), y: f(1), z: f(2) },
    rotation: { x: f(3), y: f(4), z: f(5), w: f(6) },
    scale: { x: f(7), y: f(8), z: f(9) },
    events: view.getUint32(44, true),
  };
}

export function encodeBatch(records: SyncRecord[]): Uint8Array {
  const out = new Uint8Array(RECORD_SIZE * records.length);
  records.forEach((r, i) => out.set(encodeRecord(r), i * RECORD_SIZE));
  return out;
}

export function decodeBatch(payload: Uint8Array): SyncRecord[] {
  if (payload.length % RECORD_SIZE !== 0) {
    throw new Error(`sync batch length ${payload.length} not a multiple of ${RECORD_SIZE}`);
  }
  const out: SyncRecord[] = [];
  for (let off = 0; off < payload.length; off += RECORD_SIZE) {
    out.push(decodeRecord(payload.subarray(off, off + RECORD_SIZE)));
  }
  return out;
}

export type ChangePolicy = {
  positionThresholdM: number;
  rotationThresholdDeg: number;
  scaleThreshold: number;
  minIntervalS: number;
};

export const DEFAULT_POLICY: ChangePolicy = {
  positionThresholdM: 0.005,
  rotationThresholdDeg: 1.0,
  scaleThreshold: 0.01,
  minIntervalS: 1 / 60,
};

export function shouldSync(
  prev: Pose,
  current: Pose,
  lastSent: number,
  now: number,
  policy: ChangePolicy = DEFAULT_POLICY,
): boolean {
  if (now - lastSent < policy.minIntervalS) return false;
  if (vNorm(vSub(current.position, prev.position)) > policy.positionThresholdM) return true;
  if (rotationAngleDeg(prev.rotation, current.rotation) > policy.rotationThresholdDeg) return true;
  const rel = Math.max(
    Math.abs(current.scale.x - prev.scale.x) / prev.scale.x,
    Math.abs(current.scale.y - prev.scale.y) / prev.scale.y,
    Math.abs(current.scale.z - prev.scale.z) / prev.scale.z,
  );
  return rel > policy.scaleThreshold;
}
