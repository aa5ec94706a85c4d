"""Replication layer: 48-byte sync records, change gating, ownership ledger.

Wire layout per record (little-endian, 48 bytes total):
``u32 object id | 3 x f32 position | 4 x f32 rotation (x,y,z,w) |
3 x f32 scale | u32 event bitfield``. Records carry poses in the
sender's world frame; receivers apply their own alignment.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass

from . import kernels
from .colocation import AlignmentTransform, transform_pose_between_users
from .errors import FramingError, NotFound
from .geometry import Pose, Quat, Vec3, positional_distance, rotation_angle_deg

logger = logging.getLogger(__name__)

RECORD_SIZE = kernels.RECORD_SIZE  # 48

EVENT_GRABBED = 1 << 0
EVENT_RELEASED = 1 << 1
EVENT_DESTROYED = 1 << 2
EVENT_NAMES = {EVENT_GRABBED: "grabbed", EVENT_RELEASED: "released", EVENT_DESTROYED: "destroyed"}
RESERVED_EVENT_MASK = 0xFFFFFFFF ^ (EVENT_GRABBED | EVENT_RELEASED | EVENT_DESTROYED)

DEFAULT_PENDING_CAPACITY = 256


@dataclass(frozen=True, slots=True)
class SyncRecord:
    object_id: int
    position: Vec3
    rotation: Quat
    scale: Vec3
    events: int = 0

    @classmethod
    def from_pose(cls, object_id: int, pose: Pose, events: int = 0) -> "SyncRecord":
        return cls(object_id, pose.position, pose.rotation, pose.scale, events)

    def pose(self) -> Pose:
        return Pose(position=self.position, rotation=self.rotation, scale=self.scale)

    def as_tuple(self) -> tuple:
        return (
            self.object_id,
            *self.position.as_tuple(),
            *self.rotation.as_tuple(),
            *self.scale.as_tuple(),
            self.events,
        )

    @classmethod
    def from_tuple(cls, t: tuple) -> "SyncRecord":
        return cls(t[0], Vec3(t[1], t[2], t[3]), Quat(t[4], t[5], t[6], t[7]), Vec3(t[8], t[9], t[10]), t[11])


def encode_record(record: SyncRecord) -> bytes:
    """Serialize one record to exactly 48 bytes."""
    if record.events & RESERVED_EVENT_MASK:
        raise ValueError(f"reserved event bits set: {record.events:#010x}")
    if not 0 <= record.object_id <= 0xFFFFFFFF:
        raise ValueError(f"object id out of u32 range: {record.object_id}")
    return kernels.encode_records([record.as_tuple()])


def decode_record(buf: bytes) -> SyncRecord:
    if len(buf) != RECORD_SIZE:
        raise FramingError(f"sync record must be {RECORD_SIZE} bytes, got {len(buf)}")
    return SyncRecord.from_tuple(kernels.decode_records(buf)[0])


def encode_batch(records: list[SyncRecord]) -> bytes:
    for r in records:
        if r.events & RESERVED_EVENT_MASK:
            raise ValueError(f"reserved event bits set: {r.events:#010x}")
    return kernels.encode_records([r.as_tuple() for r in records])


def decode_batch(buf: bytes) -> list[SyncRecord]:
    if len(buf) % RECORD_SIZE != 0:
        raise FramingError(
            f"sync batch length {len(buf)} is not a multiple of {RECORD_SIZE}"
        )
    return [SyncRecord.from_tuple(t) for t in kernels.decode_records(buf)]


def stage_events(record: SyncRecord | int) -> list[str]:
    """Decode the event bitfield; unknown bits are logged and ignored."""
    bits = record if isinstance(record, int) else record.events
    if bits & RESERVED_EVENT_MASK:
        logger.warning("ignoring reserved event bits %#010x", bits & RESERVED_EVENT_MASK)
    return [name for bit, name in EVENT_NAMES.items() if bits & bit]


@dataclass(frozen=True, slots=True)
class ChangePolicy:
    """Send an update only past these deltas and this minimum spacing."""

    position_threshold_m: float = 0.005
    rotation_threshold_deg: float = 1.0
    scale_threshold: float = 0.01  # relative fraction
    min_interval_s: float = 1.0 / 60.0

    def validate(self) -> "ChangePolicy":
        if min(self.position_threshold_m, self.rotation_threshold_deg, self.scale_threshold) < 0:
            raise ValueError("thresholds must be nonnegative")
        if self.min_interval_s <= 0:
            raise ValueError("min interval must be positive")
        return self


def should_sync(prev: Pose, current: Pose, last_sent: float, now: float, policy: ChangePolicy) -> bool:
    """Change-driven send gate: interval elapsed AND some delta past threshold."""
    if now - last_sent < policy.min_interval_s:
        return False
    if positional_distance(prev, current) > policy.position_threshold_m:
        return True
    if rotation_angle_deg(prev.rotation, current.rotation) > policy.rotation_threshold_deg:
        return True
    rel = max(
        abs(current.scale.x - prev.scale.x) / prev.scale.x,
        abs(current.scale.y - prev.scale.y) / prev.scale.y,
        abs(current.scale.z - prev.scale.z) / prev.scale.z,
    )
    return rel > policy.scale_threshold


def iter_golden_fixtures():
    """Yield (SyncRecord, wire bytes) pairs from the shipped golden file."""
    from importlib import resources

    text = (
        resources.files("cospace")
        .joinpath("data/fixtures/sync_records.golden")
        .read_text(encoding="utf-8")
    )
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields, hexdump = line.split("|")
        parts = fields.split()
        record = SyncRecord.from_tuple(
            (int(parts[0]), *(float(p) for p in parts[1:11]), int(parts[11]))
        )
        yield record, bytes.fromhex(hexdump.strip())


def run_conformance() -> list[str]:
    """Check every golden fixture both ways; returns failure descriptions."""
    failures = []
    for i, (record, blob) in enumerate(iter_golden_fixtures()):
        if len(blob) != RECORD_SIZE:
            failures.append(f"fixture {i}: dump is {len(blob)} bytes")
            continue
        encoded = encode_record(record)
        if encoded != blob:
            failures.append(f"fixture {i}: re-encode mismatch")
        decoded = decode_record(blob)
        if decoded != record:
            failures.append(f"fixture {i}: decode mismatch: {decoded} != {record}")
    return failures


@dataclass(frozen=True, slots=True)
class ClaimResult:
    granted: bool
    previous_owner: str | None
    epoch: int


class OwnershipLedger:
    """Server-side object ownership; mutate only on the serialized event order."""

    def __init__(self):
        self._entries: dict[int, tuple[str | None, int]] = {}

    def add(self, object_id: int, owner: str | None = None) -> None:
        if object_id in self._entries:
            raise ValueError(f"object {object_id} already in ledger")
        self._entries[object_id] = (owner, 1 if owner is not None else 0)

    def remove(self, object_id: int) -> None:
        self._entries.pop(object_id, None)

    def owner_of(self, object_id: int) -> str | None:
        entry = self._entries.get(object_id)
        if entry is None:
            raise NotFound(f"object {object_id} not in ledger")
        return entry[0]

    def epoch_of(self, object_id: int) -> int:
        entry = self._entries.get(object_id)
        if entry is None:
            raise NotFound(f"object {object_id} not in ledger")
        return entry[1]

    def __contains__(self, object_id: int) -> bool:
        return object_id in self._entries

    def objects(self) -> list[int]:
        return list(self._entries)

    def owned_by(self, user_id: str) -> list[int]:
        return [oid for oid, (owner, _) in self._entries.items() if owner == user_id]

    def claim(self, user_id: str, object_id: int) -> ClaimResult:
        """Install the claimant as owner; re-claiming your own object is a no-op."""
        entry = self._entries.get(object_id)
        if entry is None:
            raise NotFound(f"object {object_id} not in ledger")
        owner, epoch = entry
        if owner == user_id:
            return ClaimResult(granted=True, previous_owner=owner, epoch=epoch)
        self._entries[object_id] = (user_id, epoch + 1)
        return ClaimResult(granted=True, previous_owner=owner, epoch=epoch + 1)

    def release_owner(self, user_id: str) -> list[tuple[int, int]]:
        """Unown everything held by a departing user; returns (object, new epoch)."""
        bumped = []
        for oid, (owner, epoch) in list(self._entries.items()):
            if owner == user_id:
                self._entries[oid] = (None, epoch + 1)
                bumped.append((oid, epoch + 1))
        return bumped

    def snapshot(self) -> dict[int, tuple[str | None, int]]:
        return dict(self._entries)


@dataclass(slots=True)
class ReplicaObject:
    object_id: int
    prefab_name: str
    pose: Pose
    owner: str | None = None


class ReplicaStore:
    """Client-side mirror of the shared scene.

    Updates for objects that have not been created locally yet are parked
    in a bounded FIFO buffer and drained when the creation arrives.
    """

    def __init__(self, pending_capacity: int = DEFAULT_PENDING_CAPACITY):
        self.objects: dict[int, ReplicaObject] = {}
        self._pending: OrderedDict[int, list[SyncRecord]] = OrderedDict()
        self._pending_count = 0
        self._pending_capacity = pending_capacity
        self.dropped_pending = 0

    def create(self, object_id: int, prefab_name: str, pose: Pose, owner: str | None = None,
               alignment: AlignmentTransform | None = None) -> ReplicaObject:
        obj = ReplicaObject(object_id, prefab_name, pose, owner)
        self.objects[object_id] = obj
        for record in self._pending.pop(object_id, []):
            self._pending_count -= 1
            self.apply_remote_update(record, alignment)
        return obj

    def destroy(self, object_id: int) -> None:
        self.objects.pop(object_id, None)

    def apply_remote_update(
        self, record: SyncRecord, alignment: AlignmentTransform | None
    ) -> Pose | None:
        """Apply a forwarded record; returns the new local pose or None if buffered."""
        obj = self.objects.get(record.object_id)
        if obj is None:
            self._buffer(record)
            return None
        pose = record.pose()
        if alignment is not None:
            pose = transform_pose_between_users(pose, alignment)
        obj.pose = pose
        if record.events & EVENT_DESTROYED:
            self.destroy(record.object_id)
        return pose

    def _buffer(self, record: SyncRecord) -> None:
        if self._pending_count >= self._pending_capacity:
            # FIFO eviction: drop the oldest buffered record.
            for oid, queue in self._pending.items():
                queue.pop(0)
                self._pending_count -= 1
                self.dropped_pending += 1
                if not queue:
                    del self._pending[oid]
                break
        self._pending.setdefault(record.object_id, []).append(record)
        self._pending_count += 1

    def pending_count(self) -> int:
        return self._pending_count
