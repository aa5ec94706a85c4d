"""Independent reference math for tests: homogeneous 4x4 matrices.

Deliberately avoids the package's quaternion algebra so transform tests
check against a different code path (textbook matrix formulas).
"""

import numpy as np


def quat_matrix(x, y, z, w):
    """Rotation matrix from a unit quaternion (textbook expansion)."""
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rigid_matrix(quat_xyzw, translation):
    m = np.eye(4)
    m[:3, :3] = quat_matrix(*quat_xyzw)
    m[:3, 3] = translation
    return m


def axis_angle_matrix(axis, angle_deg, translation=(0.0, 0.0, 0.0)):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    a = np.radians(angle_deg)
    c, s = np.cos(a), np.sin(a)
    x, y, z = axis
    r = np.array(
        [
            [c + x * x * (1 - c), x * y * (1 - c) - z * s, x * z * (1 - c) + y * s],
            [y * x * (1 - c) + z * s, c + y * y * (1 - c), y * z * (1 - c) - x * s],
            [z * x * (1 - c) - y * s, z * y * (1 - c) + x * s, c + z * z * (1 - c)],
        ]
    )
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = translation
    return m


def apply_point(m, p):
    v = m @ np.array([p[0], p[1], p[2], 1.0])
    return v[:3]


def apply_direction(m, d):
    return m[:3, :3] @ np.asarray(d, dtype=float)


def random_unit_quat(rng):
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    return tuple(q)  # (x, y, z, w)
