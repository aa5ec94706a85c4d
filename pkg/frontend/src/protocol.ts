// Framed wire protocol: [1-byte type][u32 LE length][payload].
// Control payloads are canonical JSON (sorted keys, compact separators)
// so a given message always encodes to the same bytes.

import { Pose, Quat, RigidTransform, Vec3 } from "./math";

export const TYPE_CONTROL = 0x01;
export const TYPE_SYNC = 0x02;
export const HEADER_SIZE = 5;
export const MAX_FRAME_PAYLOAD = 16 * 1024 * 1024;

export const MESSAGE_TYPES = new Set([
  "hello",
  "register_request",
  "register_result",
  "user_text",
  "consent_prompt",
  "consent_reply",
  "response_broadcast",
  "notice",
  "stage_timings",
]);

export type ControlMessage = {
  type: string;
  sessionId: string;
  senderId: string;
  seq: number;
  body: Record<string, unknown>;
};

export function encodeFrame(frameType: number, payload: Uint8Array): Uint8Array {
  if (frameType !== TYPE_CONTROL && frameType !== TYPE_SYNC) {
    throw new Error(`unknown frame type ${frameType}`);
  }
  const out = new Uint8Array(HEADER_SIZE + payload.length);
  out[0] = frameType;
  new DataView(out.buffer).setUint32(1, payload.length, true);
  out.set(payload, HEADER_SIZE);
  return out;
}

export class FrameDecoder {
  private buf = new Uint8Array(0);

  feed(data: Uint8Array): Array<[number, Uint8Array]> {
    const joined = new Uint8Array(this.buf.length + data.length);
    joined.set(this.buf);
    joined.set(data, this.buf.length);
    this.buf = joined;
    const frames: Array<[number, Uint8Array]> = [];
    for (;;) {
      if (this.buf.length < HEADER_SIZE) return frames;
      const frameType = this.buf[0];
      if (frameType !== TYPE_CONTROL && frameType !== TYPE_SYNC) {
        throw new Error(`unknown frame type ${frameType}`);
      }
      const length = new DataView(this.buf.buffer, this.buf.byteOffset).getUint32(1, true);
      if (length > MAX_FRAME_PAYLOAD) {
        throw new Error(`declared payload ${length} exceeds frame limit`);
      }
      const end = HEADER_SIZE + length;
      if (this.buf.length < end) return frames;
      frames.push([frameType, this.buf.slice(HEADER_SIZE, end)]);
      this.buf = this.buf.slice(end);
    }
  }
}

// Canonical JSON: keys sorted at every level, no whitespace.
export function dumpsCanonical(value: unknown): string {
  if (value === null || typeof value !== "object") return JSON.stringify(value);
  if (Array.isArray(value)) return `[${value.map(dumpsCanonical).join(",")}]`;
  const entries = Object.entries(value as Record<string, unknown>)
    .sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0))
    .map(([k, v]) => `${JSON.stringify(k)}:${dumpsCanonical(v)}`);
  return `{${entries.join(",")}}`;
}

export function encodeControl(msg: ControlMessage): Uint8Array {
  return new TextEncoder().encode(dumpsCanonical(msg));
}

export function validateControlPayload(payload: unknown): asserts payload is ControlMessage {
  if (typeof payload !== "object" || payload === null || Array.isArray(payload)) {
    throw new Error("control payload must be a JSON object");
  }
  const doc = payload as Record<string, unknown>;
  const required = ["type", "sessionId", "senderId", "seq", "body"];
  for (const field of required) {
    if (!(field in doc)) throw new Error(`control message missing field ${field}`);
  }
  for (const key of Object.keys(doc)) {
    if (!required.includes(key)) throw new Error(`control message has unknown field ${key}`);
  }
  if (!MESSAGE_TYPES.has(doc.type as string)) {
    throw new Error(`unknown control message type ${String(doc.type)}`);
  }
  if (typeof doc.sessionId !== "string" || typeof doc.senderId !== "string") {
    throw new Error("sessionId and senderId must be strings");
  }
  if (typeof doc.seq !== "number" || !Number.isInteger(doc.seq) || doc.seq < 0) {
    throw new Error("seq must be a nonnegative integer");
  }
  if (typeof doc.body !== "object" || doc.body === null || Array.isArray(doc.body)) {
    throw new Error("body must be an object");
  }
}

export function decodeControl(payload: Uint8Array): ControlMessage {
  const doc = JSON.parse(new TextDecoder().decode(payload));
  validateControlPayload(doc);
  return doc;
}

export function poseToJson(pose: Pose) {
  return {
    position: [pose.position.x, pose.position.y, pose.position.z],
    rotation: [pose.rotation.x, pose.rotation.y, pose.rotation.z, pose.rotation.w],
    scale: [pose.scale.x, pose.scale.y, pose.scale.z],
  };
}

export function poseFromJson(doc: any): Pose {
  const p = doc.position as number[];
  const r = doc.rotation as number[];
  const s = (doc.scale as number[]) ?? [1, 1, 1];
  return {
    position: { x: p[0], y: p[1], z: p[2] },
    rotation: { x: r[0], y: r[1], z: r[2], w: r[3] },
    scale: { x: s[0], y: s[1], z: s[2] },
  };
}

export function transformFromJson(doc: any): RigidTransform {
  const r = doc.rotation as number[];
  const t = doc.translation as number[];
  return {
    rotation: { x: r[0], y: r[1], z: r[2], w: r[3] } as Quat,
    translation: { x: t[0], y: t[1], z: t[2] } as Vec3,
  };
}
