"""Kernel backend selection.

The compiled extension is used when importable; set ``UAVSYNTH_PURE_PYTHON=1``
to force the numpy fallback. :data:`BACKEND` names the active one.
"""

import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("UAVSYNTH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def available_backends() -> dict:
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def interp_forward(values, u, v, c0=0, out=None, impl=None):
    """Bilinear lookup; returns ``out`` (allocated as ``(N, F - c0)`` when omitted)."""
    values = np.ascontiguousarray(values)
    if out is None:
        out = np.empty((len(u), values.shape[2] - c0), dtype=values.dtype)
    (impl or _impl).interp_forward(values, _f64(u), _f64(v), int(c0), out)
    return out


def interp_backward(grad, u, v, out, c0=0, impl=None):
    if not out.flags.c_contiguous:
        raise ValueError("gradient buffer must be C-contiguous")
    (impl or _impl).interp_backward(np.ascontiguousarray(grad, dtype=out.dtype), _f64(u), _f64(v),
                                    int(c0), out)


def product_forward(vecs, impl=None):
    return (impl or _impl).product_forward(np.ascontiguousarray(vecs))


def product_backward(vecs, g, impl=None):
    vecs = np.ascontiguousarray(vecs)
    return (impl or _impl).product_backward(vecs, np.ascontiguousarray(g, dtype=vecs.dtype))


def composite_forward(sigma, delta, t, rgb, mask, bg, impl=None):
    return (impl or _impl).composite_forward(_f64(sigma), _f64(delta), _f64(t), _f64(rgb),
                                             _f64(mask), _f64(bg))


def composite_backward(sigma, delta, rgb, mask, weights, trans, t_final, bg,
                       g_rgb, g_mask, g_acc, impl=None):
    return (impl or _impl).composite_backward(
        _f64(sigma), _f64(delta), _f64(rgb), _f64(mask), _f64(weights), _f64(trans),
        _f64(t_final), _f64(bg), _f64(g_rgb), _f64(g_mask), _f64(g_acc))
