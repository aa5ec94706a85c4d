"""Reference kernels in plain Python.

Semantics here are the contract; the compiled twin in ``_native.pyx``
must agree bit-for-bit (the test suite runs both when available).
"""

import struct

_RECORD = struct.Struct("<I3f4f3fI")

RECORD_SIZE = _RECORD.size  # 48 bytes: id | position | rotation | scale | events

_DET_EPS = 1e-12
_BARY_EPS = 1e-9


def ray_mesh_hit(origin, direction, flat_tris, eps):
    """Nearest ray/triangle intersection over a flat vertex buffer.

    ``flat_tris`` holds nine floats per triangle (three vertices).
    Returns ``(triangle_index, distance)`` or ``None``. Front and back
    faces both count; hits at distance <= ``eps`` are rejected; distance
    ties go to the lowest triangle index.
    """
    ox, oy, oz = origin
    dx, dy, dz = direction
    best_t = float("inf")
    best_i = -1
    n = len(flat_tris) // 9
    for i in range(n):
        b = 9 * i
        ax = flat_tris[b]
        ay = flat_tris[b + 1]
        az = flat_tris[b + 2]
        e1x = flat_tris[b + 3] - ax
        e1y = flat_tris[b + 4] - ay
        e1z = flat_tris[b + 5] - az
        e2x = flat_tris[b + 6] - ax
        e2y = flat_tris[b + 7] - ay
        e2z = flat_tris[b + 8] - az
        # Moller-Trumbore
        px = dy * e2z - dz * e2y
        py = dz * e2x - dx * e2z
        pz = dx * e2y - dy * e2x
        det = e1x * px + e1y * py + e1z * pz
        if -_DET_EPS < det < _DET_EPS:
            continue
        inv = 1.0 / det
        sx = ox - ax
        sy = oy - ay
        sz = oz - az
        u = (sx * px + sy * py + sz * pz) * inv
        if u < -_BARY_EPS or u > 1.0 + _BARY_EPS:
            continue
        qx = sy * e1z - sz * e1y
        qy = sz * e1x - sx * e1z
        qz = sx * e1y - sy * e1x
        v = (dx * qx + dy * qy + dz * qz) * inv
        if v < -_BARY_EPS or u + v > 1.0 + _BARY_EPS:
            continue
        t = (e2x * qx + e2y * qy + e2z * qz) * inv
        if t <= eps:
            continue
        if t < best_t:
            best_t = t
            best_i = i
    if best_i < 0:
        return None
    return best_i, best_t


def encode_records(records):
    """Pack record tuples ``(id, px,py,pz, qx,qy,qz,qw, sx,sy,sz, events)``."""
    out = bytearray(RECORD_SIZE * len(records))
    off = 0
    for r in records:
        _RECORD.pack_into(out, off, *r)
        off += RECORD_SIZE
    return bytes(out)


def decode_records(buf):
    """Inverse of :func:`encode_records`; ``len(buf)`` must be a multiple of 48."""
    return [_RECORD.unpack_from(buf, off) for off in range(0, len(buf), RECORD_SIZE)]
