"""Spatial math: poses, rigid transforms, camera rays, mesh intersection.

One convention everywhere: right-handed coordinates, +Y up, cameras look
along their local -Z, pixel origin at the image top-left with +u right
and +v down. Pixels are square (vertical field of view follows from the
horizontal one and the aspect ratio). Distances in meters, public angles
in degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import GeometryError

SELF_HIT_EPS = 1e-6  # m; rejects re-hits of the surface a ray starts on
DEGENERATE_AREA = 1e-12  # m^2


@dataclass(frozen=True, slots=True)
class Vec3:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __add__(self, o: "Vec3") -> "Vec3":
        return Vec3(self.x + o.x, self.y + o.y, self.z + o.z)

    def __sub__(self, o: "Vec3") -> "Vec3":
        return Vec3(self.x - o.x, self.y - o.y, self.z - o.z)

    def __mul__(self, s: float) -> "Vec3":
        return Vec3(self.x * s, self.y * s, self.z * s)

    __rmul__ = __mul__

    def __neg__(self) -> "Vec3":
        return Vec3(-self.x, -self.y, -self.z)

    def dot(self, o: "Vec3") -> float:
        return self.x * o.x + self.y * o.y + self.z * o.z

    def cross(self, o: "Vec3") -> "Vec3":
        return Vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )

    def norm(self) -> float:
        return math.sqrt(self.dot(self))

    def normalized(self) -> "Vec3":
        n = self.norm()
        if n < 1e-12:
            raise GeometryError("cannot normalize a near-zero vector")
        return Vec3(self.x / n, self.y / n, self.z / n)

    def is_finite(self) -> bool:
        return math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True, slots=True)
class Quat:
    """Rotation quaternion, component order (x, y, z, w)."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    w: float = 1.0

    @classmethod
    def identity(cls) -> "Quat":
        return cls()

    @classmethod
    def from_axis_angle(cls, axis: Vec3, angle_deg: float) -> "Quat":
        a = axis.normalized()
        half = math.radians(angle_deg) / 2.0
        s = math.sin(half)
        return cls(a.x * s, a.y * s, a.z * s, math.cos(half))

    def __mul__(self, o: "Quat") -> "Quat":
        # Hamilton product: (a * b).rotate(v) == a.rotate(b.rotate(v))
        return Quat(
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
        )

    def conjugate(self) -> "Quat":
        return Quat(-self.x, -self.y, -self.z, self.w)

    def norm(self) -> float:
        return math.sqrt(self.x**2 + self.y**2 + self.z**2 + self.w**2)

    def normalized(self) -> "Quat":
        n = self.norm()
        if n < 1e-12:
            raise GeometryError("cannot normalize a near-zero quaternion")
        return Quat(self.x / n, self.y / n, self.z / n, self.w / n)

    def is_unit(self, tol: float = 1e-6) -> bool:
        return abs(self.norm() - 1.0) <= tol

    def rotate(self, v: Vec3) -> Vec3:
        qv = Vec3(self.x, self.y, self.z)
        t = qv.cross(v) * 2.0
        return v + t * self.w + qv.cross(t)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.z, self.w)


def rotation_angle_deg(a: Quat, b: Quat) -> float:
    """Geodesic angle between two unit rotations, in degrees."""
    d = abs(a.x * b.x + a.y * b.y + a.z * b.z + a.w * b.w)
    return math.degrees(2.0 * math.acos(min(1.0, d)))


def shortest_arc(src: Vec3, dst: Vec3, antiparallel_axis: Vec3 | None = None) -> Quat:
    """Minimal rotation taking ``src`` onto ``dst`` (both treated as directions).

    For the antiparallel case the rotation axis is ambiguous;
    ``antiparallel_axis`` pins it (any perpendicular is chosen otherwise).
    """
    a = src.normalized()
    b = dst.normalized()
    d = a.dot(b)
    if d > 1.0 - 1e-12:
        return Quat.identity()
    if d < -1.0 + 1e-12:
        if antiparallel_axis is not None:
            axis = antiparallel_axis.normalized()
        else:
            pick = Vec3(1, 0, 0) if abs(a.x) < 0.9 else Vec3(0, 0, 1)
            axis = a.cross(pick).normalized()
        return Quat.from_axis_angle(axis, 180.0)
    axis = a.cross(b)
    q = Quat(axis.x, axis.y, axis.z, 1.0 + d)
    return q.normalized()


@dataclass(frozen=True, slots=True)
class Pose:
    """Rigid placement plus per-axis scale."""

    position: Vec3 = field(default_factory=Vec3)
    rotation: Quat = field(default_factory=Quat)
    scale: Vec3 = field(default_factory=lambda: Vec3(1.0, 1.0, 1.0))

    def validate(self) -> "Pose":
        if not (self.position.is_finite() and self.scale.is_finite()):
            raise GeometryError("pose has non-finite components")
        if not self.rotation.is_unit():
            raise GeometryError("pose rotation is not unit-norm")
        if min(self.scale.x, self.scale.y, self.scale.z) <= 0.0:
            raise GeometryError("pose scale must be strictly positive")
        return self


@dataclass(frozen=True, slots=True)
class RigidTransform:
    """Rotation-then-translation frame mapping; no scale."""

    rotation: Quat = field(default_factory=Quat)
    translation: Vec3 = field(default_factory=Vec3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(
        rotation=(a.rotation * b.rotation).normalized(),
        translation=a.rotation.rotate(b.translation) + a.translation,
    )


def invert(t: RigidTransform) -> RigidTransform:
    inv_rot = t.rotation.conjugate()
    return RigidTransform(rotation=inv_rot, translation=-inv_rot.rotate(t.translation))


def apply_to_point(t: RigidTransform, v: Vec3) -> Vec3:
    return t.rotation.rotate(v) + t.translation


def apply_to_pose(t: RigidTransform, p: Pose) -> Pose:
    return Pose(
        position=apply_to_point(t, p.position),
        rotation=(t.rotation * p.rotation).normalized(),
        scale=p.scale,
    )


def rigid_from_pose(p: Pose) -> RigidTransform:
    """The rigid part of a pose (scale dropped)."""
    return RigidTransform(rotation=p.rotation.normalized(), translation=p.position)


def positional_distance(a: Pose, b: Pose) -> float:
    return (a.position - b.position).norm()


@dataclass(frozen=True, slots=True)
class CameraModel:
    """Pinhole camera: pose at capture time, horizontal FOV, image size."""

    pose: Pose
    horizontal_fov_deg: float
    image_width: int
    image_height: int

    def validate(self) -> "CameraModel":
        if not 0.0 < self.horizontal_fov_deg < 180.0:
            raise GeometryError("horizontal FOV must lie in (0, 180) degrees")
        if self.image_width < 1 or self.image_height < 1:
            raise GeometryError("image dimensions must be >= 1 pixel")
        return self


@dataclass(frozen=True, slots=True)
class Ray:
    origin: Vec3
    direction: Vec3  # unit


@dataclass(frozen=True, slots=True)
class SurfaceHit:
    point: Vec3
    normal: Vec3  # unit, oriented against the incoming ray
    distance: float


class EnvironmentMesh:
    """World-frame triangle soup standing in for real-environment colliders."""

    def __init__(self, triangles: list[tuple[Vec3, Vec3, Vec3]]):
        normals = []
        flat = np.empty(9 * len(triangles), dtype=np.float64)
        for i, (a, b, c) in enumerate(triangles):
            n = (b - a).cross(c - a)
            if n.norm() / 2.0 <= DEGENERATE_AREA:
                raise GeometryError(f"triangle {i} is degenerate")
            normals.append(n.normalized())
            flat[9 * i : 9 * i + 9] = (*a.as_tuple(), *b.as_tuple(), *c.as_tuple())
        self.triangles = triangles
        self.normals = normals
        self._flat = flat

    def __len__(self) -> int:
        return len(self.triangles)

    @classmethod
    def from_text(cls, text: str) -> "EnvironmentMesh":
        """Parse the triangle-list format: nine reals per line, ``#`` comments."""
        tris = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 9:
                raise GeometryError(f"line {lineno}: expected 9 numbers, got {len(parts)}")
            try:
                v = [float(p) for p in parts]
            except ValueError as exc:
                raise GeometryError(f"line {lineno}: {exc}") from exc
            tris.append((Vec3(*v[0:3]), Vec3(*v[3:6]), Vec3(*v[6:9])))
        return cls(tris)

    @classmethod
    def from_file(cls, path) -> "EnvironmentMesh":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def unproject(pixel: tuple[float, float], camera: CameraModel) -> Ray:
    """World ray through an image pixel under the pinhole model."""
    camera.validate()
    u, v = pixel
    if not (0.0 <= u <= camera.image_width and 0.0 <= v <= camera.image_height):
        raise GeometryError(f"pixel ({u}, {v}) outside image bounds")
    half_w = camera.image_width / 2.0
    half_h = camera.image_height / 2.0
    # Square pixels: one tangent-per-pixel scale for both axes.
    scale = math.tan(math.radians(camera.horizontal_fov_deg) / 2.0) / half_w
    local = Vec3((u - half_w) * scale, (half_h - v) * scale, -1.0).normalized()
    return Ray(
        origin=camera.pose.position,
        direction=camera.pose.rotation.rotate(local).normalized(),
    )


def project(point: Vec3, camera: CameraModel) -> tuple[float, float]:
    """Pixel coordinates of a world point; inverse of :func:`unproject`."""
    camera.validate()
    local = camera.pose.rotation.conjugate().rotate(point - camera.pose.position)
    if local.z >= -1e-12:
        raise GeometryError("point is not in front of the camera")
    half_w = camera.image_width / 2.0
    scale = math.tan(math.radians(camera.horizontal_fov_deg) / 2.0) / half_w
    u = half_w + (local.x / -local.z) / scale
    v = camera.image_height / 2.0 - (local.y / -local.z) / scale
    return (u, v)


def raycast(ray: Ray, env: EnvironmentMesh) -> SurfaceHit | None:
    """Nearest mesh intersection, or None on a miss.

    Both triangle orientations are reported; the returned normal is the
    stored one flipped, if needed, to oppose the ray direction.
    """
    hit = kernels.ray_mesh_hit(
        ray.origin.as_tuple(), ray.direction.as_tuple(), env._flat, SELF_HIT_EPS
    )
    if hit is None:
        return None
    index, t = hit
    normal = env.normals[index]
    if normal.dot(ray.direction) > 0.0:
        normal = -normal
    return SurfaceHit(point=ray.origin + ray.direction * t, normal=normal, distance=t)


def correct_pose(hit: SurfaceHit, object_extents: Vec3) -> Pose:
    """Surface-attachment pose: seat the object's box on the hit surface.

    The object's local +Y is rotated onto the surface normal by the
    shortest arc (180 degrees about +X when the normal is exactly -Y),
    and the position is pushed half the box height along the normal.
    """
    if min(object_extents.x, object_extents.y, object_extents.z) <= 0.0:
        raise GeometryError("object extents must be strictly positive")
    rotation = shortest_arc(Vec3(0, 1, 0), hit.normal, antiparallel_axis=Vec3(1, 0, 0))
    return Pose(
        position=hit.point + hit.normal * (object_extents.y / 2.0),
        rotation=rotation,
        scale=Vec3(1.0, 1.0, 1.0),
    )
