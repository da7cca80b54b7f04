"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the NumPy
implementation is loaded. Setting ``MIXFLOWLM_KERNELS=python`` forces
the fallback.
"""

import os

from . import _pykernels as python_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and os.environ.get("MIXFLOWLM_KERNELS", "").lower() != "python":
    backend = compiled_backend
else:
    backend = python_backend

BACKEND = backend.NAME

AVAILABLE = {"python": python_backend}
if compiled_backend is not None:
    AVAILABLE["cython"] = compiled_backend


def get(name=None):
    """Return a backend module by name (default: the active one)."""
    if name is None:
        return backend
    try:
        return AVAILABLE[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None


log_ndtr = backend.log_ndtr
ndtri_log = backend.ndtri_log
ndtri_pair = backend.ndtri_pair
mixd_forward = backend.mixd_forward
mixd_inverse = backend.mixd_inverse
