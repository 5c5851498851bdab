"""Hot-kernel dispatch: compiled extension when available, numpy fallback.

Backend is chosen once at import. Override with the environment variable
``LATSEG_KERNELS=numpy`` (force fallback) or ``LATSEG_KERNELS=cython``
(fail loudly if the extension is missing), or at runtime via
:func:`set_backend`.
"""

import os

from . import numpy_impl

_FORCED = os.environ.get("LATSEG_KERNELS", "auto").lower()

try:
    from . import _cyimpl
except ImportError:  # extension not built
    _cyimpl = None
    if _FORCED == "cython":
        raise

if _FORCED == "numpy" or _cyimpl is None:
    _impl = numpy_impl
else:
    _impl = _cyimpl


def available_backends():
    names = ["numpy"]
    if _cyimpl is not None:
        names.append("cython")
    return names


def backend_name():
    return _impl.NAME


def set_backend(name):
    """Select the kernel backend by name ('numpy' or 'cython')."""
    global _impl
    if name == "numpy":
        _impl = numpy_impl
    elif name == "cython":
        if _cyimpl is None:
            raise RuntimeError("compiled kernel extension is not available")
        _impl = _cyimpl
    else:
        raise ValueError(f"unknown kernel backend: {name!r}")


def conv2d_forward(x, w, b, pad):
    return _impl.conv2d_forward(x, w, b, pad)


def conv2d_backward(x, w, dy, pad):
    return _impl.conv2d_backward(x, w, dy, pad)


def label_components(mask):
    return _impl.label_components(mask)
