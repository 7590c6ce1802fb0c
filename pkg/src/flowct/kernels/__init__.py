"""Convolution kernel backend selection.

The compiled Cython core is preferred when the extension built; otherwise
the numpy fallback is used.  `FLOWCT_KERNELS=numpy|cython` forces a backend
(the benchmark and cross-checking tests rely on this).
"""

import os

from . import numpy_backend

_forced = os.environ.get("FLOWCT_KERNELS", "").strip().lower()

if _forced == "numpy":
    _impl = numpy_backend
elif _forced == "cython":
    from . import _core as _impl
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = numpy_backend

BACKEND = _impl.NAME

conv3d_forward = _impl.conv3d_forward
conv3d_grad_input = _impl.conv3d_grad_input
conv3d_grad_weight = _impl.conv3d_grad_weight
out_extent = numpy_backend.out_extent
