"""Hot loops behind the conv and pooling ops.

Two interchangeable backends with identical signatures:

- ``numba``: explicit loops compiled with ``@njit`` (default when numba imports)
- ``numpy``: strided windows + ``tensordot``

``KGRAFT_KERNELS=numpy`` forces the fallback. Both are deterministic; they
agree to rounding, not bit for bit, so compare runs within one backend.
"""

import os

from . import _numpy

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba is optional
    _numba = None

BACKENDS = {"numpy": _numpy}
if _numba is not None:
    BACKENDS["numba"] = _numba


def _select():
    wanted = os.environ.get("KGRAFT_KERNELS", "").strip().lower()
    if wanted:
        if wanted not in BACKENDS:
            raise ImportError(f"KGRAFT_KERNELS={wanted!r} unavailable; have {sorted(BACKENDS)}")
        return wanted
    return "numba" if "numba" in BACKENDS else "numpy"


BACKEND = _select()
_active = BACKENDS[BACKEND]

conv_forward = _active.conv_forward
conv_backward = _active.conv_backward
maxpool_forward = _active.maxpool_forward
maxpool_backward = _active.maxpool_backward
head_epoch = _active.head_epoch
