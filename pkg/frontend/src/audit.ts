// Outbound-traffic auditor: the client-side restatement of the privacy
// gate. Checks every frame this client sent against the framed protocol
// and proves no image bytes ever left the device — requests reference
// frames by id, crops are produced and shown by the edge server, and a
// consent reply carries only {requestId, approved}.

import { OutboundFrame } from "./session";
import {
  TYPE_CONTROL,
  TYPE_SYNC,
  decodeControl,
  dumpsCanonical,
} from "./protocol";
import { RECORD_SIZE } from "./records";

const IMAGE_MAGIC = new TextEncoder().encode("CIMG");

export type AuditResult = {
  ok: boolean;
  problems: string[];
  controlFrames: number;
  syncFrames: number;
};

function containsImageContainer(payload: Uint8Array): boolean {
  outer: for (let i = 0; i + IMAGE_MAGIC.length <= payload.length; i++) {
    for (let j = 0; j < IMAGE_MAGIC.length; j++) {
      if (payload[i + j] !== IMAGE_MAGIC[j]) continue outer;
    }
    return true;
  }
  return false;
}

export function auditOutbound(log: OutboundFrame[]): AuditResult {
  const problems: string[] = [];
  let controlFrames = 0;
  let syncFrames = 0;
  let lastSeq = 0;
  for (const [index, frame] of log.entries()) {
    if (frame.frameType === TYPE_CONTROL) {
      controlFrames += 1;
      let msg;
      try {
        msg = decodeControl(frame.payload);
      } catch (err) {
        problems.push(`frame ${index}: ${(err as Error).message}`);
        continue;
      }
      // Canonical encoding: the bytes must be exactly the canonical form.
      const canonical = dumpsCanonical(msg);
      if (new TextDecoder().decode(frame.payload) !== canonical) {
        problems.push(`frame ${index}: control payload is not canonical JSON`);
      }
      if (msg.seq <= lastSeq) {
        problems.push(`frame ${index}: seq ${msg.seq} not after ${lastSeq}`);
      }
      lastSeq = msg.seq;
      if (containsImageContainer(frame.payload)) {
        problems.push(`frame ${index}: image bytes in a ${msg.type} message`);
      }
      if (msg.type === "consent_reply") {
        const keys = Object.keys(msg.body).sort();
        if (dumpsCanonical(keys) !== '["approved","requestId"]') {
          problems.push(`frame ${index}: consent reply carries extra fields ${keys}`);
        }
      }
    } else if (frame.frameType === TYPE_SYNC) {
      syncFrames += 1;
      if (frame.payload.length === 0 || frame.payload.length % RECORD_SIZE !== 0) {
        problems.push(
          `frame ${index}: sync payload of ${frame.payload.length} bytes is not a record batch`,
        );
      }
      if (containsImageContainer(frame.payload)) {
        problems.push(`frame ${index}: image bytes on the sync channel`);
      }
    } else {
      problems.push(`frame ${index}: unknown frame type ${frame.frameType}`);
    }
  }
  return { ok: problems.length === 0, problems, controlFrames, syncFrames };
}
