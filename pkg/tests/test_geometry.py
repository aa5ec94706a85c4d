import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from cospace.errors import GeometryError
from cospace.geometry import (
    CameraModel,
    EnvironmentMesh,
    Pose,
    Quat,
    Ray,
    RigidTransform,
    Vec3,
    apply_to_point,
    apply_to_pose,
    compose,
    correct_pose,
    invert,
    positional_distance,
    project,
    raycast,
    rotation_angle_deg,
    unproject,
)
from cospace import kernels


def vec_close(v: Vec3, expected, tol=1e-6):
    assert abs(v.x - expected[0]) <= tol, (v, expected)
    assert abs(v.y - expected[1]) <= tol, (v, expected)
    assert abs(v.z - expected[2]) <= tol, (v, expected)


def make_camera(position=(0, 0, 0), rotation=Quat(), fov=90.0, width=100, height=100):
    return CameraModel(
        pose=Pose(position=Vec3(*position), rotation=rotation),
        horizontal_fov_deg=fov,
        image_width=width,
        image_height=height,
    )


def floor_quad(half=5.0, y=0.0):
    a, b = Vec3(-half, y, -half), Vec3(half, y, -half)
    c, d = Vec3(half, y, half), Vec3(-half, y, half)
    # Wound so the computed normals point +Y.
    return EnvironmentMesh([(a, c, b), (a, d, c)])


# --- unprojection -----------------------------------------------------------

def test_unproject_center_is_optical_axis():
    ray = unproject((50, 50), make_camera())
    vec_close(ray.direction, (0, 0, -1))
    vec_close(ray.origin, (0, 0, 0))


def test_unproject_right_edge_matches_pinhole_oracle():
    # tan(fov/2) = 1 at the right edge of a 90-degree camera.
    expected = np.array([1.0, 0.0, -1.0])
    expected /= np.linalg.norm(expected)
    ray = unproject((100, 50), make_camera())
    vec_close(ray.direction, expected)


def test_unproject_top_edge_is_plus_y():
    # Square pixels imply a 45-degree vertical half-angle; +v down means
    # the top edge looks up (+Y).
    expected = np.array([0.0, 1.0, -1.0])
    expected /= np.linalg.norm(expected)
    ray = unproject((50, 0), make_camera())
    vec_close(ray.direction, expected)


@pytest.mark.parametrize("pixel", [(-1, 50), (101, 50), (50, -0.5), (50, 100.5)])
def test_unproject_rejects_out_of_bounds(pixel):
    with pytest.raises(GeometryError):
        unproject(pixel, make_camera())


def test_unproject_center_parallel_to_camera_forward_any_pose():
    rng = np.random.default_rng(7)
    for _ in range(50):
        q = oracle.random_unit_quat(rng)
        cam = make_camera(position=tuple(rng.normal(size=3)), rotation=Quat(*q))
        ray = unproject((50, 50), cam)
        forward = oracle.apply_direction(oracle.rigid_matrix(q, (0, 0, 0)), (0, 0, -1))
        cross = np.cross([ray.direction.x, ray.direction.y, ray.direction.z], forward)
        assert np.linalg.norm(cross) < 1e-6


def test_project_inverts_unproject():
    rng = np.random.default_rng(11)
    cam = make_camera(position=(0.3, 1.1, -0.2), rotation=Quat(*oracle.random_unit_quat(rng)),
                      fov=70, width=640, height=480)
    for _ in range(200):
        u = rng.uniform(0, 640)
        v = rng.uniform(0, 480)
        ray = unproject((u, v), cam)
        point = ray.origin + ray.direction * rng.uniform(0.5, 10.0)
        pu, pv = project(point, cam)
        assert abs(pu - u) < 1e-6 and abs(pv - v) < 1e-6


# --- raycast -----------------------------------------------------------------

def test_raycast_axis_aligned_drop():
    hit = raycast(Ray(Vec3(0, 1, 0), Vec3(0, -1, 0)), floor_quad())
    assert hit is not None
    vec_close(hit.point, (0, 0, 0))
    vec_close(hit.normal, (0, 1, 0))
    assert abs(hit.distance - 1.0) < 1e-9


def test_raycast_away_from_floor_misses():
    assert raycast(Ray(Vec3(0, 1, 0), Vec3(0, 1, 0)), floor_quad()) is None


def test_raycast_diagonal_matches_plane_intersection():
    d = Vec3(1, -1, 0).normalized()
    hit = raycast(Ray(Vec3(0, 0.5, 0), d), floor_quad())
    assert hit is not None
    vec_close(hit.point, (0.5, 0, 0))
    assert abs(hit.distance - 0.5 * math.sqrt(2)) < 1e-9


def test_raycast_reports_backface_with_flipped_normal():
    # Ray from below the floor, traveling up: hits the underside.
    hit = raycast(Ray(Vec3(0, -1, 0), Vec3(0, 1, 0)), floor_quad())
    assert hit is not None
    vec_close(hit.normal, (0, -1, 0))


def test_raycast_empty_mesh_misses():
    assert raycast(Ray(Vec3(0, 1, 0), Vec3(0, -1, 0)), EnvironmentMesh([])) is None


def test_raycast_tie_breaks_lowest_index():
    # Two coincident triangles; the kernel must report index 0.
    tri = (Vec3(-1, 0, -1), Vec3(1, 0, 1), Vec3(1, 0, -1))
    mesh = EnvironmentMesh([tri, tri])
    got = kernels.ray_mesh_hit((0.5, 1.0, -0.5), (0.0, -1.0, 0.0), mesh._flat, 1e-6)
    assert got is not None and got[0] == 0


def test_raycast_ignores_hits_within_epsilon():
    mesh = floor_quad()
    assert raycast(Ray(Vec3(0, 1e-9, 0), Vec3(0, -1, 0)), mesh) is None


def test_reprojection_round_trip_against_facing_plane():
    cam = make_camera(position=(0, 0, 2), fov=60, width=320, height=240)
    # Plane at z = 0 facing the camera.
    big = 50.0
    a, b = Vec3(-big, -big, 0), Vec3(big, -big, 0)
    c, d = Vec3(big, big, 0), Vec3(-big, big, 0)
    mesh = EnvironmentMesh([(a, b, c), (a, c, d)])
    rng = np.random.default_rng(3)
    for _ in range(200):
        u = rng.uniform(0, 320)
        v = rng.uniform(0, 240)
        hit = raycast(unproject((u, v), cam), mesh)
        assert hit is not None
        pu, pv = project(hit.point, cam)
        assert math.hypot(pu - u, pv - v) < 0.5


# --- pose correction ----------------------------------------------------------

def test_correct_pose_up_facing_surface():
    from cospace.geometry import SurfaceHit

    hit = SurfaceHit(point=Vec3(0, 0, 0), normal=Vec3(0, 1, 0), distance=1.0)
    pose = correct_pose(hit, Vec3(0.2, 0.2, 0.2))
    vec_close(pose.position, (0, 0.1, 0))
    assert rotation_angle_deg(pose.rotation, Quat.identity()) < 1e-6
    vec_close(pose.scale, (1, 1, 1))


def test_correct_pose_wall_surface_maps_up_to_normal():
    from cospace.geometry import SurfaceHit

    hit = SurfaceHit(point=Vec3(1, 1, 0), normal=Vec3(1, 0, 0), distance=1.0)
    pose = correct_pose(hit, Vec3(0.2, 0.4, 0.2))
    vec_close(pose.position, (1.2, 1, 0))
    vec_close(pose.rotation.rotate(Vec3(0, 1, 0)), (1, 0, 0))


def test_correct_pose_ceiling_uses_plus_x_axis():
    from cospace.geometry import SurfaceHit

    hit = SurfaceHit(point=Vec3(0, 2, 0), normal=Vec3(0, -1, 0), distance=1.0)
    pose = correct_pose(hit, Vec3(0.2, 0.2, 0.2))
    vec_close(pose.position, (0, 1.9, 0))
    vec_close(pose.rotation.rotate(Vec3(0, 1, 0)), (0, -1, 0))
    # 180 degrees about +X also sends +Z to -Z.
    vec_close(pose.rotation.rotate(Vec3(0, 0, 1)), (0, 0, -1))


def test_correct_pose_offset_is_half_height_along_normal():
    from cospace.geometry import SurfaceHit

    rng = np.random.default_rng(5)
    for _ in range(50):
        n = Vec3(*rng.normal(size=3)).normalized()
        p = Vec3(*rng.normal(size=3))
        extents = Vec3(*rng.uniform(0.05, 1.0, size=3))
        pose = correct_pose(SurfaceHit(point=p, normal=n, distance=1.0), extents)
        offset = pose.position - p
        assert abs(offset.norm() - extents.y / 2) < 1e-9
        assert abs(offset.normalized().dot(n) - 1.0) < 1e-9


# --- rigid transform algebra ----------------------------------------------------

def rigid_from_axis_angle(axis, angle_deg, translation):
    return RigidTransform(
        rotation=Quat.from_axis_angle(Vec3(*axis), angle_deg),
        translation=Vec3(*translation),
    )


def test_compose_invert_round_trip():
    t = rigid_from_axis_angle((0.3, 1, -0.2), 37.0, (1, 2, 3))
    identity = compose(t, invert(t))
    vec_close(identity.translation, (0, 0, 0))
    assert rotation_angle_deg(identity.rotation, Quat.identity()) < 1e-6


def test_translation_applied_to_point():
    t = RigidTransform(translation=Vec3(1, 0, 0))
    vec_close(apply_to_point(t, Vec3(0, 0, 0)), (1, 0, 0))


def test_rotate_then_translate_matches_matrix_oracle():
    # Rotation 90 degrees about +Y then translation (1,0,0) on (0,0,1).
    t = rigid_from_axis_angle((0, 1, 0), 90.0, (1, 0, 0))
    m = oracle.axis_angle_matrix((0, 1, 0), 90.0, (1, 0, 0))
    expected = oracle.apply_point(m, (0, 0, 1))
    got = apply_to_point(t, Vec3(0, 0, 1))
    vec_close(got, expected)
    vec_close(got, (2, 0, 0))


def test_apply_to_pose_rotates_position_and_rotation_keeps_scale():
    t = rigid_from_axis_angle((0, 1, 0), 90.0, (0, 0, 0))
    p = Pose(position=Vec3(0, 0, 1), rotation=Quat.identity(), scale=Vec3(2, 3, 4))
    out = apply_to_pose(t, p)
    vec_close(out.position, (1, 0, 0))
    vec_close(out.scale, (2, 3, 4))
    assert abs(rotation_angle_deg(out.rotation, t.rotation)) < 1e-6


def test_positional_distance_examples():
    assert positional_distance(Pose(), Pose()) == 0.0
    a = Pose(position=Vec3(0, 0, 0))
    b = Pose(position=Vec3(3, 4, 0))
    assert abs(positional_distance(a, b) - 5.0) < 1e-12
    c = Pose(position=Vec3(0.01, 0.02, 0.02))
    assert abs(positional_distance(c, Pose()) - 0.03) < 1e-12


finite = st.floats(min_value=-100, max_value=100, allow_nan=False, allow_infinity=False)
angles = st.floats(min_value=-180, max_value=180, allow_nan=False)
axes = st.tuples(finite, finite, finite).filter(lambda a: sum(x * x for x in a) > 1e-3)


@st.composite
def rigid_transforms(draw):
    axis = draw(axes)
    return rigid_from_axis_angle(axis, draw(angles), (draw(finite), draw(finite), draw(finite)))


@st.composite
def poses(draw):
    axis = draw(axes)
    return Pose(
        position=Vec3(draw(finite), draw(finite), draw(finite)),
        rotation=Quat.from_axis_angle(Vec3(*axis), draw(angles)),
    )


@settings(max_examples=100, deadline=None)
@given(rigid_transforms(), rigid_transforms(), rigid_transforms())
def test_compose_associative(a, b, c):
    left = compose(compose(a, b), c)
    right = compose(a, compose(b, c))
    probe = Vec3(0.3, -0.7, 1.1)
    vec_close(apply_to_point(left, probe), apply_to_point(right, probe).as_tuple(), tol=1e-6)


@settings(max_examples=100, deadline=None)
@given(rigid_transforms())
def test_invert_is_two_sided(t):
    for combo in (compose(t, invert(t)), compose(invert(t), t)):
        vec_close(combo.translation, (0, 0, 0), tol=1e-6)
        assert rotation_angle_deg(combo.rotation, Quat.identity()) < 1e-5


@settings(max_examples=100, deadline=None)
@given(poses(), poses(), poses())
def test_positional_distance_is_a_metric(a, b, c):
    assert positional_distance(a, b) >= 0
    assert abs(positional_distance(a, b) - positional_distance(b, a)) < 1e-9
    assert positional_distance(a, a) == 0.0
    assert positional_distance(a, c) <= positional_distance(a, b) + positional_distance(b, c) + 1e-9


# --- mesh file format ------------------------------------------------------------

MESH_TEXT = """
# floor: two triangles, nine reals each
-5 0 -5   5 0 5   5 0 -5
-5 0 -5  -5 0 5   5 0 5  # second half
"""


def test_mesh_from_text_parses_triangles_and_comments():
    mesh = EnvironmentMesh.from_text(MESH_TEXT)
    assert len(mesh) == 2
    hit = raycast(Ray(Vec3(0, 1, 0), Vec3(0, -1, 0)), mesh)
    assert hit is not None and abs(hit.distance - 1.0) < 1e-9


def test_mesh_from_text_rejects_wrong_arity():
    with pytest.raises(GeometryError):
        EnvironmentMesh.from_text("1 2 3 4 5")


def test_mesh_rejects_degenerate_triangle():
    with pytest.raises(GeometryError):
        EnvironmentMesh([(Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0))])


def test_mesh_file_round_trip(tmp_path):
    path = tmp_path / "room.tris"
    path.write_text(MESH_TEXT)
    mesh = EnvironmentMesh.from_file(path)
    assert len(mesh) == 2
