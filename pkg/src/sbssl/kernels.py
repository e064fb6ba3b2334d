"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
NumPy twins in ``_pykernels`` are used. ``SBSSL_KERNELS=python`` forces the
fallback. Callers go through the wrappers below, which take arrays of any
shape and normalise them to the contiguous layouts the kernels expect.
"""

import os

import numpy as np

from . import _pykernels

_impl = _pykernels
BACKEND = "python"
if os.environ.get("SBSSL_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass


def use_backend(name):
    """Switch backend at runtime ("cython" or "python"); returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    if name == "python":
        _impl = _pykernels
    elif name == "cython":
        from . import _ckernels

        _impl = _ckernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    return prev


def available_backends():
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names


def _flat(x):
    return np.ascontiguousarray(x).reshape(-1)


def _rows(x):
    x = np.ascontiguousarray(x)
    return x.reshape(-1, x.shape[-1])


def gelu_forward(x):
    return _impl.gelu_forward(_flat(x)).reshape(x.shape)


def gelu_backward(x, gy):
    return _impl.gelu_backward(_flat(x), _flat(gy.astype(x.dtype, copy=False))).reshape(x.shape)


def softmax_forward(x):
    return _impl.softmax_forward(_rows(x)).reshape(x.shape)


def softmax_backward(y, gy):
    return _impl.softmax_backward(_rows(y), _rows(gy.astype(y.dtype, copy=False))).reshape(y.shape)


def layernorm_forward(x, gain, bias, eps):
    y, xhat, rstd = _impl.layernorm_forward(
        _rows(x), _flat(gain.astype(x.dtype, copy=False)), _flat(bias.astype(x.dtype, copy=False)), float(eps)
    )
    return y.reshape(x.shape), xhat, rstd


def layernorm_backward(gy, xhat, rstd, gain):
    gx, ggain, gbias = _impl.layernorm_backward(
        _rows(gy.astype(xhat.dtype, copy=False)), xhat, rstd, _flat(gain.astype(xhat.dtype, copy=False))
    )
    return gx.reshape(gy.shape), ggain, gbias
