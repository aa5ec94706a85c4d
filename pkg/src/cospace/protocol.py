"""Framed wire protocol between clients and the edge server.

Every frame is ``[1-byte type][4-byte little-endian length][payload]``.
Type 0x01 carries one control message as canonical JSON (sorted keys,
compact separators); type 0x02 carries a batch of 48-byte sync records.
A browser-compatible message transport wraps the identical frame bytes,
one frame per message; the framing is the contract either way.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from .errors import FramingError
from .geometry import Pose, Quat, RigidTransform, Vec3

FRAME_HEADER = struct.Struct("<BI")
TYPE_CONTROL = 0x01
TYPE_SYNC = 0x02
MAX_FRAME_PAYLOAD = 16 * 1024 * 1024

# Control message types (the closed union carried on the text channel).
HELLO = "hello"
REGISTER_REQUEST = "register_request"
REGISTER_RESULT = "register_result"
USER_TEXT = "user_text"
CONSENT_PROMPT = "consent_prompt"
CONSENT_REPLY = "consent_reply"
RESPONSE_BROADCAST = "response_broadcast"
NOTICE = "notice"
STAGE_TIMINGS = "stage_timings"

MESSAGE_TYPES = frozenset(
    {
        HELLO,
        REGISTER_REQUEST,
        REGISTER_RESULT,
        USER_TEXT,
        CONSENT_PROMPT,
        CONSENT_REPLY,
        RESPONSE_BROADCAST,
        NOTICE,
        STAGE_TIMINGS,
    }
)


def encode_frame(frame_type: int, payload: bytes) -> bytes:
    if frame_type not in (TYPE_CONTROL, TYPE_SYNC):
        raise FramingError(f"unknown frame type {frame_type:#04x}")
    if len(payload) > MAX_FRAME_PAYLOAD:
        raise FramingError(f"payload of {len(payload)} bytes exceeds frame limit")
    return FRAME_HEADER.pack(frame_type, len(payload)) + payload


class FrameDecoder:
    """Incremental decoder for a framed byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        """Consume bytes; return every complete (type, payload) frame."""
        self._buf += data
        frames = []
        while True:
            if len(self._buf) < FRAME_HEADER.size:
                return frames
            ftype, length = FRAME_HEADER.unpack_from(self._buf)
            if ftype not in (TYPE_CONTROL, TYPE_SYNC):
                raise FramingError(f"unknown frame type {ftype:#04x}")
            if length > MAX_FRAME_PAYLOAD:
                raise FramingError(f"declared payload {length} exceeds frame limit")
            end = FRAME_HEADER.size + length
            if len(self._buf) < end:
                return frames
            frames.append((ftype, bytes(self._buf[FRAME_HEADER.size : end])))
            del self._buf[:end]

    def pending_bytes(self) -> int:
        return len(self._buf)


@dataclass(frozen=True, slots=True)
class ControlMessage:
    type: str
    session_id: str
    sender_id: str
    seq: int
    body: dict = field(default_factory=dict)

    def to_payload(self) -> dict:
        return {
            "type": self.type,
            "sessionId": self.session_id,
            "senderId": self.sender_id,
            "seq": self.seq,
            "body": self.body,
        }

    def encode(self) -> bytes:
        return dumps_canonical(self.to_payload())


def dumps_canonical(payload: dict) -> bytes:
    """Canonical JSON bytes: sorted keys, compact, ASCII-safe."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def validate_control_payload(payload) -> None:
    """Envelope validation shared with the protocol validator CLI."""
    if not isinstance(payload, dict):
        raise FramingError("control payload must be a JSON object")
    missing = {"type", "sessionId", "senderId", "seq", "body"} - payload.keys()
    if missing:
        raise FramingError(f"control message missing fields: {sorted(missing)}")
    extra = payload.keys() - {"type", "sessionId", "senderId", "seq", "body"}
    if extra:
        raise FramingError(f"control message has unknown fields: {sorted(extra)}")
    if payload["type"] not in MESSAGE_TYPES:
        raise FramingError(f"unknown control message type {payload['type']!r}")
    if not isinstance(payload["sessionId"], str) or not isinstance(payload["senderId"], str):
        raise FramingError("sessionId and senderId must be strings")
    if not isinstance(payload["seq"], int) or payload["seq"] < 0:
        raise FramingError("seq must be a nonnegative integer")
    if not isinstance(payload["body"], dict):
        raise FramingError("body must be an object")


def decode_control(payload: bytes) -> ControlMessage:
    try:
        doc = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"control payload is not valid JSON: {exc}") from exc
    validate_control_payload(doc)
    return ControlMessage(
        type=doc["type"],
        session_id=doc["sessionId"],
        sender_id=doc["senderId"],
        seq=doc["seq"],
        body=doc["body"],
    )


def pose_to_json(pose: Pose) -> dict:
    return {
        "position": [pose.position.x, pose.position.y, pose.position.z],
        "rotation": [pose.rotation.x, pose.rotation.y, pose.rotation.z, pose.rotation.w],
        "scale": [pose.scale.x, pose.scale.y, pose.scale.z],
    }


def pose_from_json(doc: dict) -> Pose:
    return Pose(
        position=Vec3(*doc["position"]),
        rotation=Quat(*doc["rotation"]),
        scale=Vec3(*doc.get("scale", (1.0, 1.0, 1.0))),
    )


def transform_to_json(t: RigidTransform) -> dict:
    return {
        "rotation": [t.rotation.x, t.rotation.y, t.rotation.z, t.rotation.w],
        "translation": [t.translation.x, t.translation.y, t.translation.z],
    }


def transform_from_json(doc: dict) -> RigidTransform:
    return RigidTransform(
        rotation=Quat(*doc["rotation"]),
        translation=Vec3(*doc["translation"]),
    )
