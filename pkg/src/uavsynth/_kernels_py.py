"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Used when the extension is not built, or when ``UAVSYNTH_PURE_PYTHON=1``.
"""

import numpy as np


def _cells(q, r):
    u = np.clip(q, 0.0, 1.0) * (r - 1)
    i = np.minimum(u.astype(np.intp), r - 2)
    return i, u - i


def _corner_weights(u, v, ru, rv):
    i, wu = _cells(u, ru)
    j, wv = _cells(v, rv)
    return i, j, (1.0 - wu) * (1.0 - wv), (1.0 - wu) * wv, wu * (1.0 - wv), wu * wv


def interp_forward(values, u, v, c0, out):
    """Bilinear lookup of ``values[Ru, Rv, F]`` at normalised coords ``u, v`` in [0, 1].

    Channels ``c0 : c0 + out.shape[1]`` are written into ``out``. Grid nodes sit
    at ``i / (R - 1)``; coordinates are clamped to the edge.
    """
    ru, rv, _ = values.shape
    vals = values[:, :, c0:c0 + out.shape[1]]
    i, j, a00, a01, a10, a11 = _corner_weights(u, v, ru, rv)
    out[...] = (a00[:, None] * vals[i, j] + a01[:, None] * vals[i, j + 1]
                + a10[:, None] * vals[i + 1, j] + a11[:, None] * vals[i + 1, j + 1])


def interp_backward(grad, u, v, c0, out):
    """Scatter-add ``grad[N, C]`` into ``out[Ru, Rv, c0:c0 + C]`` (adjoint of ``interp_forward``)."""
    ru, rv, nf = out.shape
    nc = grad.shape[1]
    i, j, a00, a01, a10, a11 = _corner_weights(u, v, ru, rv)
    g = np.asarray(grad, dtype=np.float64)
    ch = np.arange(c0, c0 + nc)
    idx = np.concatenate([((i * rv + j) * nf)[:, None] + ch,
                          ((i * rv + j + 1) * nf)[:, None] + ch,
                          (((i + 1) * rv + j) * nf)[:, None] + ch,
                          (((i + 1) * rv + j + 1) * nf)[:, None] + ch]).ravel()
    w = np.concatenate([a00[:, None] * g, a01[:, None] * g, a10[:, None] * g,
                        a11[:, None] * g]).ravel()
    acc = np.bincount(idx, weights=w, minlength=ru * rv * nf)
    out += acc.reshape(ru, rv, nf).astype(out.dtype, copy=False)


def product_forward(vecs):
    """Elementwise product over the leading axis of ``vecs[P, N, D]``."""
    out = vecs[0].copy()
    for v in vecs[1:]:
        out *= v
    return out


def product_backward(vecs, g):
    """``out[p] = g * prod_{r != p} vecs[r]`` via prefix/suffix products (no division)."""
    out = np.empty_like(vecs)
    acc = np.ones_like(vecs[0])
    for p in range(len(vecs)):
        out[p] = acc
        acc = acc * vecs[p]
    acc = g.astype(vecs.dtype, copy=True)
    for p in range(len(vecs) - 1, -1, -1):
        out[p] *= acc
        acc = acc * vecs[p]
    return out


def composite_forward(sigma, delta, t, rgb, mask, bg):
    """Alpha-composite ``R`` rays of ``n`` samples each.

    Returns ``(rgb, mask, depth, acc, weights, trans, t_final)`` where
    ``trans[:, i]`` is the transmittance reaching sample ``i``.
    """
    e = np.exp(-sigma * delta)
    trans = np.cumprod(np.concatenate([np.ones((len(e), 1)), e], axis=1), axis=1)
    t_final = trans[:, -1].copy()
    trans = trans[:, :-1]
    weights = trans * (1.0 - e)
    acc = weights.sum(axis=1)
    out_rgb = np.einsum("rn,rnc->rc", weights, rgb) + t_final[:, None] * bg
    out_mask = (weights * mask).sum(axis=1)
    depth = (weights * t).sum(axis=1) / np.maximum(acc, 1e-6)
    return out_rgb, out_mask, depth, acc, weights, np.ascontiguousarray(trans), t_final


def composite_backward(sigma, delta, rgb, mask, weights, trans, t_final, bg, g_rgb, g_mask, g_acc):
    """Gradients of the composited outputs w.r.t. per-sample density, colour and mask."""
    s = np.einsum("rc,rnc->rn", g_rgb, rgb) + g_mask[:, None] * mask + g_acc[:, None]
    ws = weights * s
    # suffix[i] = sum_{j > i} w_j s_j + T_final * (g . bg)
    tail = np.cumsum(ws[:, ::-1], axis=1)[:, ::-1]
    suffix = tail - ws + (t_final * (g_rgb @ bg))[:, None]
    t_next = trans * np.exp(-sigma * delta)
    g_sigma = delta * (t_next * s - suffix)
    g_rgbs = weights[:, :, None] * g_rgb[:, None, :]
    g_masks = weights * g_mask[:, None]
    return g_sigma, g_rgbs, g_masks
