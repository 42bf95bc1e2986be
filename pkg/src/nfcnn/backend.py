"""Convolution backend selection.

The environment variable ``NFCNN_BACKEND`` picks the kernel implementation:

* ``auto`` (default): the numba jit kernels when numba imports, else numpy
* ``numba``: force the jit kernels, fail loudly if numba is missing
* ``numpy``: force the pure-numpy fallback

``set_backend`` re-resolves at runtime; benchmarks and tests use it.
"""

import os

from . import kernels_numpy

CHOICES = ("auto", "numba", "numpy")

_impl = None


def _resolve(name):
    if name not in CHOICES:
        raise ValueError(f"unknown backend {name!r}, expected one of {CHOICES}")
    if name == "numpy":
        return kernels_numpy
    try:
        from . import kernels_numba
    except ImportError:
        if name == "numba":
            raise
        return kernels_numpy
    return kernels_numba


def set_backend(name):
    global _impl
    _impl = _resolve(name)
    return _impl.NAME


def backend_name():
    return _impl.NAME


def conv2d_forward(xp, weight, bias):
    return _impl.conv2d_forward(xp, weight, bias)


def conv2d_backward(up, xp, weight):
    return _impl.conv2d_backward(up, xp, weight)


set_backend(os.environ.get("NFCNN_BACKEND", "auto").lower())
