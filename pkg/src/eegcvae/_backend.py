"""Kernel backend selection.

The compiled Cython module is used when it imports; otherwise the numpy
fallback. Setting ``EEGCVAE_BACKEND=python`` forces the fallback.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def _default():
    forced = os.environ.get("EEGCVAE_BACKEND", "").strip().lower()
    if forced:
        if forced not in _BACKENDS:
            raise ImportError(f"EEGCVAE_BACKEND={forced!r} unavailable; have {sorted(_BACKENDS)}")
        return forced
    return "cython" if "cython" in _BACKENDS else "python"


_active = _default()


def available():
    return sorted(_BACKENDS)


def name():
    return _active


def use(backend):
    """Switch the active kernel backend ("cython" or "python")."""
    global _active
    if backend not in _BACKENDS:
        raise ValueError(f"unknown or unbuilt backend {backend!r}; available: {available()}")
    _active = backend


def _k():
    return _BACKENDS[_active]


def sosfilt(sos, x):
    sos = np.ascontiguousarray(sos, dtype=np.float64)
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    return _k().sosfilt(sos, x)


def _pair(a, b):
    dtype = np.result_type(a.dtype, b.dtype)
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    return np.ascontiguousarray(a, dtype=dtype), np.ascontiguousarray(b, dtype=dtype)


def corr2d(x, w):
    x, w = _pair(x, w)
    return _k().corr2d(x, w)


def corr2d_grad_input(dy, w, in_h, in_w):
    dy, w = _pair(dy, w)
    return _k().corr2d_grad_input(dy, w, int(in_h), int(in_w))


def corr2d_grad_weight(x, dy, kh, kw):
    x, dy = _pair(x, dy)
    return _k().corr2d_grad_weight(x, dy, int(kh), int(kw))
