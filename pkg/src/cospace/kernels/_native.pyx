# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of ``kernels.pure``; see that module for the contract."""

import sys

if sys.byteorder != "little":
    # The codec memcpy's host-order scalars; wire format is little-endian.
    raise ImportError("native kernels require a little-endian host")

from libc.stdint cimport uint32_t
from libc.string cimport memcpy

RECORD_SIZE = 48

cdef double _DET_EPS = 1e-12
cdef double _BARY_EPS = 1e-9


def ray_mesh_hit(origin, direction, const double[::1] flat_tris, double eps):
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double dx = direction[0], dy = direction[1], dz = direction[2]
    cdef double ax, ay, az, e1x, e1y, e1z, e2x, e2y, e2z
    cdef double px, py, pz, det, inv, sx, sy, sz, u, qx, qy, qz, v, t
    cdef double best_t = float("inf")
    cdef Py_ssize_t best_i = -1
    cdef Py_ssize_t n = flat_tris.shape[0] // 9
    cdef Py_ssize_t i, b
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


def encode_records(list records):
    cdef Py_ssize_t n = len(records)
    cdef bytearray out = bytearray(48 * n)
    cdef unsigned char[::1] dst = out
    cdef Py_ssize_t off = 0
    cdef uint32_t word
    cdef float f
    cdef Py_ssize_t k
    for r in records:
        word = <uint32_t> r[0]
        memcpy(&dst[off], &word, 4)
        off += 4
        for k in range(1, 11):
            f = <float> (<double> r[k])
            memcpy(&dst[off], &f, 4)
            off += 4
        word = <uint32_t> r[11]
        memcpy(&dst[off], &word, 4)
        off += 4
    return bytes(out)


def decode_records(buf):
    cdef const unsigned char[::1] src = buf
    cdef Py_ssize_t total = src.shape[0]
    cdef Py_ssize_t n = total // 48
    cdef list out = []
    cdef Py_ssize_t off = 0
    cdef uint32_t oid, events
    cdef float fields[10]
    cdef Py_ssize_t i
    for i in range(n):
        memcpy(&oid, &src[off], 4)
        memcpy(&fields[0], &src[off + 4], 40)
        memcpy(&events, &src[off + 44], 4)
        off += 48
        out.append(
            (
                oid,
                fields[0], fields[1], fields[2],
                fields[3], fields[4], fields[5], fields[6],
                fields[7], fields[8], fields[9],
                events,
            )
        )
    return out
