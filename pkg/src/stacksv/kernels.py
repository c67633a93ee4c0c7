"""Convolution backend selection.

The compiled Cython kernels are used when the extension built successfully;
otherwise the pure-NumPy implementation takes over.  Set ``STACKSV_PURE=1``
to force the NumPy path (useful for determinism comparisons and for
benchmarking one backend against the other).
"""

import os

from . import _conv_numpy

if os.environ.get("STACKSV_PURE", "") not in ("", "0"):
    _impl = _conv_numpy
    BACKEND = "pure"
else:
    try:
        from . import _convkern as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _conv_numpy
        BACKEND = "pure"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernel = _impl.conv2d_backward_kernel


def active_backend():
    return BACKEND
