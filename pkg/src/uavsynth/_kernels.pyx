# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: bilinear plane lookup/scatter, Hadamard products and
alpha compositing.

Semantics mirror ``_kernels_py`` exactly; see that module for the reference.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp

cnp.import_array()


cdef inline void _cell(double q, Py_ssize_t r, Py_ssize_t* i0, double* w) noexcept nogil:
    cdef double u
    cdef Py_ssize_t i
    if q < 0.0:
        q = 0.0
    elif q > 1.0:
        q = 1.0
    u = q * (r - 1)
    i = <Py_ssize_t> u
    if i > r - 2:
        i = r - 2
    i0[0] = i
    w[0] = u - i


def interp_forward(floating[:, :, ::1] values, const double[::1] u, const double[::1] v,
                   Py_ssize_t c0, floating[:, ::1] out):
    """out[k, :] = bilinear(values)[u_k, v_k, c0:c0 + out.shape[1]]"""
    cdef Py_ssize_t ru = values.shape[0], rv = values.shape[1], nf = out.shape[1]
    cdef Py_ssize_t n = u.shape[0], k, c, i, j
    cdef double wu, wv, a00, a01, a10, a11
    with nogil:
        for k in range(n):
            _cell(u[k], ru, &i, &wu)
            _cell(v[k], rv, &j, &wv)
            a00 = (1.0 - wu) * (1.0 - wv)
            a01 = (1.0 - wu) * wv
            a10 = wu * (1.0 - wv)
            a11 = wu * wv
            for c in range(nf):
                out[k, c] = <floating> (a00 * values[i, j, c0 + c] + a01 * values[i, j + 1, c0 + c]
                                        + a10 * values[i + 1, j, c0 + c]
                                        + a11 * values[i + 1, j + 1, c0 + c])


def interp_backward(const floating[:, ::1] grad, const double[::1] u, const double[::1] v,
                    Py_ssize_t c0, floating[:, :, ::1] out):
    """Adjoint of ``interp_forward``: scatter-add ``grad`` into ``out[..., c0:]``."""
    cdef Py_ssize_t ru = out.shape[0], rv = out.shape[1], nf = grad.shape[1]
    cdef Py_ssize_t n = u.shape[0], k, c, i, j
    cdef double wu, wv, a00, a01, a10, a11, g
    with nogil:
        for k in range(n):
            _cell(u[k], ru, &i, &wu)
            _cell(v[k], rv, &j, &wv)
            a00 = (1.0 - wu) * (1.0 - wv)
            a01 = (1.0 - wu) * wv
            a10 = wu * (1.0 - wv)
            a11 = wu * wv
            for c in range(nf):
                g = grad[k, c]
                out[i, j, c0 + c] += <floating> (a00 * g)
                out[i, j + 1, c0 + c] += <floating> (a01 * g)
                out[i + 1, j, c0 + c] += <floating> (a10 * g)
                out[i + 1, j + 1, c0 + c] += <floating> (a11 * g)


def product_forward(const floating[:, :, ::1] vecs):
    """Elementwise product over the leading axis of ``vecs[P, N, D]``."""
    cdef Py_ssize_t P = vecs.shape[0], n = vecs.shape[1], d = vecs.shape[2], p, k, c
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef floating acc
    with nogil:
        for k in range(n):
            for c in range(d):
                acc = vecs[0, k, c]
                for p in range(1, P):
                    acc = acc * vecs[p, k, c]
                out[k, c] = acc
    return out_arr


def product_backward(const floating[:, :, ::1] vecs, const floating[:, ::1] g):
    """``out[p] = g * prod_{r != p} vecs[r]`` via prefix/suffix products."""
    cdef Py_ssize_t P = vecs.shape[0], n = vecs.shape[1], d = vecs.shape[2], p, k, c
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((P, n, d), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef floating acc
    with nogil:
        for k in range(n):
            for c in range(d):
                acc = 1
                for p in range(P):
                    out[p, k, c] = acc
                    acc = acc * vecs[p, k, c]
                acc = g[k, c]
                for p in range(P - 1, -1, -1):
                    out[p, k, c] = out[p, k, c] * acc
                    acc = acc * vecs[p, k, c]
    return out_arr


def composite_forward(const double[:, ::1] sigma, const double[:, ::1] delta,
                      const double[:, ::1] t, const double[:, :, ::1] rgb,
                      const double[:, ::1] mask, const double[::1] bg):
    cdef Py_ssize_t nr = sigma.shape[0], ns = sigma.shape[1], r, i
    out_rgb_a = np.empty((nr, 3))
    out_mask_a = np.empty(nr)
    depth_a = np.empty(nr)
    acc_a = np.empty(nr)
    weights_a = np.empty((nr, ns))
    trans_a = np.empty((nr, ns))
    tfinal_a = np.empty(nr)
    cdef double[:, ::1] out_rgb = out_rgb_a
    cdef double[::1] out_mask = out_mask_a, depth = depth_a, acc = acc_a, tfinal = tfinal_a
    cdef double[:, ::1] weights = weights_a, trans = trans_a
    cdef double T, e, w, cr, cg, cb, m, d, a
    with nogil:
        for r in range(nr):
            T = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            m = 0.0
            d = 0.0
            a = 0.0
            for i in range(ns):
                e = exp(-sigma[r, i] * delta[r, i])
                w = T * (1.0 - e)
                trans[r, i] = T
                weights[r, i] = w
                cr = cr + w * rgb[r, i, 0]
                cg = cg + w * rgb[r, i, 1]
                cb = cb + w * rgb[r, i, 2]
                m = m + w * mask[r, i]
                d = d + w * t[r, i]
                a = a + w
                T = T * e
            out_rgb[r, 0] = cr + T * bg[0]
            out_rgb[r, 1] = cg + T * bg[1]
            out_rgb[r, 2] = cb + T * bg[2]
            out_mask[r] = m
            acc[r] = a
            depth[r] = d / (a if a > 1e-6 else 1e-6)
            tfinal[r] = T
    return out_rgb_a, out_mask_a, depth_a, acc_a, weights_a, trans_a, tfinal_a


def composite_backward(const double[:, ::1] sigma, const double[:, ::1] delta,
                       const double[:, :, ::1] rgb, const double[:, ::1] mask,
                       const double[:, ::1] weights, const double[:, ::1] trans,
                       const double[::1] tfinal, const double[::1] bg,
                       const double[:, ::1] g_rgb, const double[::1] g_mask,
                       const double[::1] g_acc):
    cdef Py_ssize_t nr = sigma.shape[0], ns = sigma.shape[1], r, i
    g_sigma_a = np.empty((nr, ns))
    g_rgbs_a = np.empty((nr, ns, 3))
    g_masks_a = np.empty((nr, ns))
    cdef double[:, ::1] g_sigma = g_sigma_a, g_masks = g_masks_a
    cdef double[:, :, ::1] g_rgbs = g_rgbs_a
    cdef double suffix, s, w, gr, gg, gb, gm, ga, tnext
    with nogil:
        for r in range(nr):
            gr = g_rgb[r, 0]
            gg = g_rgb[r, 1]
            gb = g_rgb[r, 2]
            gm = g_mask[r]
            ga = g_acc[r]
            suffix = tfinal[r] * (gr * bg[0] + gg * bg[1] + gb * bg[2])
            for i in range(ns - 1, -1, -1):
                w = weights[r, i]
                s = gr * rgb[r, i, 0] + gg * rgb[r, i, 1] + gb * rgb[r, i, 2] + gm * mask[r, i] + ga
                tnext = trans[r, i] * exp(-sigma[r, i] * delta[r, i])
                g_sigma[r, i] = delta[r, i] * (tnext * s - suffix)
                suffix = suffix + w * s
                g_rgbs[r, i, 0] = w * gr
                g_rgbs[r, i, 1] = w * gg
                g_rgbs[r, i, 2] = w * gb
                g_masks[r, i] = w * gm
    return g_sigma_a, g_rgbs_a, g_masks_a
