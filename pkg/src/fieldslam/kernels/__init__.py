"""Interpolation kernels with two interchangeable backends.

The compiled Cython backend (_gridkern) is selected at import when present;
otherwise the numpy backend is used. Set FIELDSLAM_PURE_PYTHON=1 to force the
numpy backend. Both expose the same six functions with identical semantics:

    bilinear_forward / bilinear_backward / bilinear_input_grad
    hashgrid_forward / hashgrid_backward / hashgrid_input_grad
"""

from __future__ import annotations

import os

from . import numpy_backend

BACKEND = "numpy"
_impl = numpy_backend

if not os.environ.get("FIELDSLAM_PURE_PYTHON"):
    try:
        from . import _gridkern as _native

        _impl = _native
        BACKEND = "native"
    except ImportError:
        pass

HASH_PRIMES = numpy_backend.HASH_PRIMES

bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
bilinear_input_grad = _impl.bilinear_input_grad
hashgrid_forward = _impl.hashgrid_forward
hashgrid_backward = _impl.hashgrid_backward
hashgrid_input_grad = _impl.hashgrid_input_grad


def available_backends():
    """Names of importable backends ("numpy" always, "native" if compiled)."""
    names = ["numpy"]
    try:
        from . import _gridkern  # noqa: F401
        names.append("native")
    except ImportError:
        pass
    return names


def get_backend(name):
    """Return the backend module for "numpy" or "native"."""
    if name == "numpy":
        return numpy_backend
    if name == "native":
        from . import _gridkern
        return _gridkern
    raise ValueError(f"unknown kernel backend: {name!r}")
