"""Kernel backend chosen at import time.

The compiled extension is used when it imports; setting ``BTSGP_PURE_PYTHON``
forces the numpy fallback. :func:`use_backend` swaps backends temporarily
(benchmarks and equivalence tests).
"""

import contextlib
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

AVAILABLE = {"python": _pykernels}
if _ckernels is not None:
    AVAILABLE["cython"] = _ckernels

if os.environ.get("BTSGP_PURE_PYTHON") or _ckernels is None:
    kernels = _pykernels
else:
    kernels = _ckernels


def name() -> str:
    return kernels.NAME


@contextlib.contextmanager
def use_backend(backend: str):
    global kernels
    if backend not in AVAILABLE:
        raise ValueError(f"backend {backend!r} not available (have {sorted(AVAILABLE)})")
    saved = kernels
    kernels = AVAILABLE[backend]
    try:
        yield kernels
    finally:
        kernels = saved
