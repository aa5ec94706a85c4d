import { describe, expect, it } from "vitest";

import { auditOutbound } from "../src/audit";
import { OutboundFrame } from "../src/session";
import { TYPE_CONTROL, TYPE_SYNC, dumpsCanonical } from "../src/protocol";

const control = (payload: string): OutboundFrame => ({
  at: 0,
  frameType: TYPE_CONTROL,
  payload: new TextEncoder().encode(payload),
});

const okMessage = (seq: number, body: Record<string, unknown> = {}) =>
  dumpsCanonical({ type: "notice", sessionId: "s", senderId: "u", seq, body });

describe("outbound audit", () => {
  it("accepts a clean log", () => {
    const log = [control(okMessage(1)), control(okMessage(2))];
    expect(auditOutbound(log).ok).toBe(true);
  });

  it("flags non-canonical control payloads", () => {
    const sloppy = JSON.stringify(
      { type: "notice", sessionId: "s", senderId: "u", seq: 1, body: {} }, null, 2,
    );
    const result = auditOutbound([control(sloppy)]);
    expect(result.ok).toBe(false);
    expect(result.problems[0]).toMatch(/canonical/);
  });

  it("flags stale sequence numbers", () => {
    const result = auditOutbound([control(okMessage(5)), control(okMessage(5))]);
    expect(result.problems.some((p) => p.includes("seq"))).toBe(true);
  });

  it("flags image bytes smuggled into any outbound frame", () => {
    const withImage = dumpsCanonical({
      type: "consent_reply", sessionId: "s", senderId: "u", seq: 1,
      body: { approved: true, requestId: "r", image: "CIMGdeadbeef" },
    });
    const result = auditOutbound([control(withImage)]);
    expect(result.problems.some((p) => p.includes("image bytes"))).toBe(true);
    expect(result.problems.some((p) => p.includes("extra fields"))).toBe(true);
  });

  it("flags malformed sync payloads", () => {
    const bad: OutboundFrame = { at: 0, frameType: TYPE_SYNC, payload: new Uint8Array(47) };
    const result = auditOutbound([bad]);
    expect(result.problems[0]).toMatch(/record batch/);
  });
});
