"""Tag-based registration and alignment between users' world frames.

Each user observes a fixed physical tag once; the stored tag pose anchors
that user's world frame. Aligning two users is then a basis change
through the shared tag. Only the rigid part of the tag pose participates:
metric-tracking devices leave no scale ambiguity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, RegistrationFailed
from .geometry import (
    Pose,
    Quat,
    RigidTransform,
    Vec3,
    apply_to_point,
    apply_to_pose,
    compose,
    invert,
    rigid_from_pose,
)

logger = logging.getLogger(__name__)

DEFAULT_PROBE_CUBE_EDGE_M = 3.0  # working envelope around the tag


@dataclass(frozen=True, slots=True)
class TagObservation:
    """One detector sighting of the tag, in the observer's world frame."""

    tag_id: int
    tag_pose: Pose
    tag_size_m: float
    observation_distance_m: float
    timestamp: float

    def validate(self) -> "TagObservation":
        if self.tag_size_m <= 0.0:
            raise RegistrationFailed("tag size must be positive")
        if self.observation_distance_m < 0.0:
            raise RegistrationFailed("observation distance must be >= 0")
        if not self.tag_pose.rotation.is_unit():
            raise RegistrationFailed("tag pose rotation is not unit-norm")
        if not self.tag_pose.position.is_finite():
            raise RegistrationFailed("tag pose position is not finite")
        return self


@dataclass(frozen=True, slots=True)
class RegistrationRecord:
    user_id: str
    tag_id: int
    tag_pose: Pose
    registered_at: float


@dataclass(frozen=True, slots=True)
class AlignmentTransform:
    """Maps poses from ``from_user``'s world frame into ``to_user``'s."""

    from_user: str
    to_user: str
    transform: RigidTransform


class RegistrationRegistry:
    """Last-write-wins store of one active registration per user."""

    def __init__(self):
        self._records: dict[str, RegistrationRecord] = {}

    def register(
        self, user_id: str, observation: TagObservation | None, now: float
    ) -> RegistrationRecord:
        if observation is None:
            raise RegistrationFailed("no tag observation; try the registration again")
        observation.validate()
        record = RegistrationRecord(
            user_id=user_id,
            tag_id=observation.tag_id,
            tag_pose=observation.tag_pose,
            registered_at=now,
        )
        self._records[user_id] = record
        return record

    def get(self, user_id: str) -> RegistrationRecord | None:
        return self._records.get(user_id)

    def users(self) -> list[str]:
        return list(self._records)

    def __len__(self) -> int:
        return len(self._records)


def alignment_transform(
    rec_from: RegistrationRecord, rec_to: RegistrationRecord
) -> AlignmentTransform:
    """Basis change from one user's world frame to another's via the shared tag."""
    if rec_from.tag_id != rec_to.tag_id:
        raise AlignmentError(
            f"users registered different tags ({rec_from.tag_id} vs {rec_to.tag_id})"
        )
    t_from = rigid_from_pose(rec_from.tag_pose)
    t_to = rigid_from_pose(rec_to.tag_pose)
    return AlignmentTransform(
        from_user=rec_from.user_id,
        to_user=rec_to.user_id,
        transform=compose(t_to, invert(t_from)),
    )


def transform_pose_between_users(pose: Pose, alignment: AlignmentTransform) -> Pose:
    return apply_to_pose(alignment.transform, pose)


def cube_corner_probes(
    center: Vec3 = Vec3(), edge_m: float = DEFAULT_PROBE_CUBE_EDGE_M
) -> list[Vec3]:
    """Default probe set: the 8 corners of a cube centered on the tag."""
    h = edge_m / 2.0
    return [
        center + Vec3(sx * h, sy * h, sz * h)
        for sx in (-1.0, 1.0)
        for sy in (-1.0, 1.0)
        for sz in (-1.0, 1.0)
    ]


def spatial_inconsistency(
    align_estimated: AlignmentTransform,
    align_truth: AlignmentTransform,
    probe_points: list[Vec3],
) -> float:
    """Mean positional deviation between two candidate alignments.

    Each probe is mapped through both transforms; the metric is the mean
    distance between the two images, in meters.
    """
    if not probe_points:
        raise ValueError("probe set must be nonempty")
    total = 0.0
    for p in probe_points:
        a = apply_to_point(align_estimated.transform, p)
        b = apply_to_point(align_truth.transform, p)
        total += (a - b).norm()
    return total / len(probe_points)


@dataclass(frozen=True, slots=True)
class NoiseSpec:
    """Synthetic tag-detector error model.

    Effective sigmas grow with observation distance and shrink with tag
    size: sigma_eff = sigma * (1 + distance_scale * distance / tag_size).
    Position noise is isotropic Gaussian; rotation noise is a Gaussian
    angle about a random axis.
    """

    position_std_m: float = 0.002
    rotation_std_deg: float = 0.1
    distance_scale: float = 0.1
    seed: int = 0

    def validate(self) -> "NoiseSpec":
        if self.position_std_m < 0 or self.rotation_std_deg < 0 or self.distance_scale < 0:
            raise ValueError("noise spec parameters must be nonnegative")
        return self

    def effective_factor(self, distance_m: float, tag_size_m: float) -> float:
        return 1.0 + self.distance_scale * distance_m / tag_size_m


def synthetic_observation(
    true_tag_pose: Pose,
    noise: NoiseSpec,
    *,
    tag_id: int = 0,
    tag_size_m: float = 0.2,
    observation_distance_m: float = 1.0,
    timestamp: float = 0.0,
    draw: int = 0,
) -> TagObservation:
    """Simulated detector output for a known tag pose.

    Deterministic in (seed, draw): repeated calls with the same arguments
    return the same observation; vary ``draw`` for independent samples.
    """
    noise.validate()
    factor = noise.effective_factor(observation_distance_m, tag_size_m)
    pos_std = noise.position_std_m * factor
    rot_std = noise.rotation_std_deg * factor
    pose = true_tag_pose
    if pos_std > 0.0 or rot_std > 0.0:
        rng = np.random.default_rng([noise.seed & 0x7FFFFFFF, draw & 0x7FFFFFFF])
        offset = rng.normal(0.0, 1.0, size=3)
        angle_deg = float(rng.normal(0.0, 1.0)) * rot_std
        axis_raw = rng.normal(0.0, 1.0, size=3)
        position = pose.position + Vec3(*(offset * pos_std))
        rotation = pose.rotation
        axis_norm = float(np.linalg.norm(axis_raw))
        if abs(angle_deg) > 1e-12 and axis_norm > 1e-12:
            axis = Vec3(*(axis_raw / axis_norm))
            rotation = (Quat.from_axis_angle(axis, angle_deg) * rotation).normalized()
        pose = Pose(position=position, rotation=rotation, scale=pose.scale)
    return TagObservation(
        tag_id=tag_id,
        tag_pose=pose,
        tag_size_m=tag_size_m,
        observation_distance_m=observation_distance_m,
        timestamp=timestamp,
    )
