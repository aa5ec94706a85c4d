import { describe, expect, it } from "vitest";

import {
  FrameDecoder,
  TYPE_CONTROL,
  TYPE_SYNC,
  decodeControl,
  dumpsCanonical,
  encodeControl,
  encodeFrame,
  validateControlPayload,
} from "../src/protocol";

describe("framing", () => {
  it("lays out type, little-endian length, payload", () => {
    const frame = encodeFrame(TYPE_SYNC, new TextEncoder().encode("abc"));
    expect(frame[0]).toBe(0x02);
    expect([...frame.slice(1, 5)]).toEqual([3, 0, 0, 0]);
  });

  it("reassembles frames split at arbitrary boundaries", () => {
    const first = encodeFrame(TYPE_CONTROL, new TextEncoder().encode("one"));
    const second = encodeFrame(TYPE_SYNC, new Uint8Array(48));
    const stream = new Uint8Array([...first, ...second]);
    const decoder = new FrameDecoder();
    const got: Array<[number, Uint8Array]> = [];
    for (let i = 0; i < stream.length; i += 3) {
      got.push(...decoder.feed(stream.slice(i, i + 3)));
    }
    expect(got.length).toBe(2);
    expect(got[0][0]).toBe(TYPE_CONTROL);
    expect(new TextDecoder().decode(got[0][1])).toBe("one");
    expect(got[1][1].length).toBe(48);
  });

  it("rejects unknown frame types", () => {
    const decoder = new FrameDecoder();
    expect(() => decoder.feed(new Uint8Array([9, 0, 0, 0, 0]))).toThrow(/unknown/);
  });
});

describe("control messages", () => {
  it("canonical JSON sorts keys at every level", () => {
    expect(dumpsCanonical({ b: 1, a: { z: 2, y: [3, { q: 4, p: 5 }] } })).toBe(
      '{"a":{"y":[3,{"p":5,"q":4}],"z":2},"b":1}',
    );
  });

  it("encode/decode round trip", () => {
    const msg = {
      type: "notice",
      sessionId: "s",
      senderId: "u",
      seq: 3,
      body: { code: "ok" },
    };
    expect(decodeControl(encodeControl(msg))).toEqual(msg);
  });

  it("validator rejects malformed envelopes", () => {
    expect(() => validateControlPayload({ type: "notice" })).toThrow(/missing/);
    expect(() =>
      validateControlPayload({
        type: "mystery", sessionId: "s", senderId: "u", seq: 1, body: {},
      }),
    ).toThrow(/unknown control message type/);
    expect(() =>
      validateControlPayload({
        type: "notice", sessionId: "s", senderId: "u", seq: -1, body: {},
      }),
    ).toThrow(/seq/);
    expect(() =>
      validateControlPayload({
        type: "notice", sessionId: "s", senderId: "u", seq: 1, body: {}, extra: 1,
      }),
    ).toThrow(/unknown field/);
  });
});
