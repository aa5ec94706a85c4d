"""Parity between the compiled kernels and their pure-Python reference."""

import numpy as np
import pytest

from cospace.kernels import BACKEND, pure

try:
    from cospace.kernels import _native as native
except ImportError:
    native = None

backends = [pure] if native is None else [pure, native]


def random_records(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        vals = [float(np.float32(v)) for v in rng.uniform(-1e4, 1e4, size=10)]
        out.append((int(rng.integers(0, 2**32)), *vals, int(rng.integers(0, 8))))
    return out


def random_mesh(n_tris, seed=1):
    rng = np.random.default_rng(seed)
    return rng.uniform(-3, 3, size=9 * n_tris).astype(np.float64)


@pytest.mark.parametrize("impl", backends, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_codec_round_trip(impl):
    records = random_records(500)
    blob = impl.encode_records(records)
    assert len(blob) == 48 * len(records)
    assert impl.decode_records(blob) == records


@pytest.mark.skipif(native is None, reason="native kernels not built")
def test_codec_backends_agree_bitwise():
    records = random_records(2000, seed=7)
    assert native.encode_records(records) == pure.encode_records(records)
    blob = pure.encode_records(records)
    assert native.decode_records(blob) == pure.decode_records(blob)


@pytest.mark.skipif(native is None, reason="native kernels not built")
def test_raycast_backends_agree():
    rng = np.random.default_rng(3)
    mesh = random_mesh(200, seed=4)
    for _ in range(300):
        origin = tuple(rng.uniform(-5, 5, size=3))
        direction = rng.normal(size=3)
        direction = tuple(direction / np.linalg.norm(direction))
        a = pure.ray_mesh_hit(origin, direction, mesh, 1e-6)
        b = native.ray_mesh_hit(origin, direction, mesh, 1e-6)
        if a is None or b is None:
            assert a == b
        else:
            assert a[0] == b[0]
            assert abs(a[1] - b[1]) < 1e-12


def test_selected_backend_reported():
    assert BACKEND in ("native", "pure")
