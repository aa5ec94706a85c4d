"""Hot-path kernels: compiled fast path with a pure-Python fallback.

The compiled extension (``_native``, Cython) covers the two inner loops
that dominate a busy session: ray/mesh intersection and the 48-byte
sync-record codec. Selection happens once at import. Set
``COSPACE_PURE_KERNELS=1`` to force the fallback (used by the benchmark
and by CI on platforms without a compiler).
"""

import os

if os.environ.get("COSPACE_PURE_KERNELS") == "1":
    from . import pure as _impl

    BACKEND = "pure"
else:
    try:
        from . import _native as _impl  # type: ignore[attr-defined]

        BACKEND = "native"
    except ImportError:
        from . import pure as _impl

        BACKEND = "pure"

RECORD_SIZE = _impl.RECORD_SIZE
ray_mesh_hit = _impl.ray_mesh_hit
encode_records = _impl.encode_records
decode_records = _impl.decode_records

__all__ = [
    "BACKEND",
    "RECORD_SIZE",
    "ray_mesh_hit",
    "encode_records",
    "decode_records",
]
