"""Independent brute-force reference implementations used as test oracles.

Nothing here imports the package's numerical code paths; each function is a
direct, loop-based transcription of the definition it checks.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

AXES = {"x": 0, "y": 1, "z": 2, "t": 3}
SPATIAL = ("xy", "xz", "yz")
ALL = ("xy", "xz", "yz", "xt", "yt", "zt")


def bilinear(values, u, v):
    """Bilinear lookup at one point, nodes at i/(R-1), coordinates clamped."""
    ru, rv = values.shape[:2]
    x = min(max(u, 0.0), 1.0) * (ru - 1)
    y = min(max(v, 0.0), 1.0) * (rv - 1)
    i = min(int(math.floor(x)), ru - 2)
    j = min(int(math.floor(y)), rv - 2)
    a, b = x - i, y - j
    return ((1 - a) * (1 - b) * values[i, j] + (1 - a) * b * values[i, j + 1]
            + a * (1 - b) * values[i + 1, j] + a * b * values[i + 1, j + 1])


def plane_vector(stack, k, group, pair, q, D):
    vals = np.asarray(stack.scales[k][group][pair].values, dtype=np.float64)
    return bilinear(vals, q[AXES[pair[0]]], q[AXES[pair[1]]])[:D]


def mask_value(stack, k, pair, q, D):
    vals = np.asarray(stack.scales[k]["dynamic"][pair].values, dtype=np.float64)
    return bilinear(vals, q[AXES[pair[0]]], q[AXES[pair[1]]])[D]


def field_direct(stack, q):
    """Per-point fused features; returns dict with f or f_s, f_d, mask_logits."""
    D, S = stack.D, stack.num_scales
    if stack.mode == "extended":
        fs, fd = [], []
        for k in range(S):
            ps = np.ones(D)
            for pair in SPATIAL:
                ps = ps * plane_vector(stack, k, "static", pair, q, D)
            pd = np.ones(D)
            for pair in ALL:
                pd = pd * plane_vector(stack, k, "dynamic", pair, q, D)
            fs.append(ps)
            fd.append(pd)
        logits = np.array([sum(mask_value(stack, k, p, q, D) for k in range(S)) / S
                           for p in ("xt", "yt", "zt")])
        return {"f_s": np.concatenate(fs), "f_d": np.concatenate(fd), "mask_logits": logits}
    pairs = ALL if stack.mode == "stock" else SPATIAL
    out = []
    for k in range(S):
        p = np.ones(D)
        for pair in pairs:
            p = p * plane_vector(stack, k, "main", pair, q, D)
        out.append(p)
    return {"f": np.concatenate(out)}


def cosine_direct(stack, qs):
    D = stack.D
    total = 0.0
    for q in qs:
        for k in range(stack.num_scales):
            for pair in SPATIAL:
                a = plane_vector(stack, k, "static", pair, q, D)
                b = plane_vector(stack, k, "dynamic", pair, q, D)
                den = math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(x * x for x in b))
                if den > 1e-12:
                    total += abs(sum(x * y for x, y in zip(a, b)) / den)
    return total / len(qs)


def encode_direction_direct(d):
    out = list(d)
    for k in range(4):
        for fn in (math.sin, math.cos):
            out.extend(fn((2 ** k) * math.pi * c) for c in d)
    return np.array(out)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def _softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def _dense(w, b, x, relu):
    y = [sum(x[i] * w[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]
    return [max(v, 0.0) for v in y] if relu else y


def decode_direct(arrays, mode, feats, d):
    """One sample through the decoder written as explicit sums."""
    a = {k: np.asarray(v, dtype=np.float64).tolist() for k, v in arrays.items()}
    if mode == "extended":
        x = list(feats["f_s"]) + list(feats["f_d"]) + list(feats["mask_logits"])
        h = _dense(a["fusion.0.w"], a["fusion.0.b"], x, True)
        f = _dense(a["fusion.1.w"], a["fusion.1.b"], h, False)
        m = _sig(_dense(a["mask.0.w"], a["mask.0.b"], list(feats["mask_logits"]), False)[0])
    else:
        f = list(feats["f"])
        m = 0.0
    hd = _dense(a["density.0.w"], a["density.0.b"], f, True)
    sigma = _softplus(_dense(a["density.1.w"], a["density.1.b"], hd, False)[0])
    hc = _dense(a["color.0.w"], a["color.0.b"], f + list(encode_direction_direct(d)), True)
    rgb = [_sig(v) for v in _dense(a["color.1.w"], a["color.1.b"], hc, False)]
    return sigma, np.array(rgb), m


def composite_direct(sigmas, rgbs, masks, deltas, ts, bg):
    T = 1.0
    c = np.zeros(3)
    m = acc = depth = 0.0
    trans = []
    for s, col, mk, dl, t in zip(sigmas, rgbs, masks, deltas, ts):
        trans.append(T)
        alpha = 1.0 - math.exp(-s * dl)
        w = T * alpha
        c = c + w * np.asarray(col)
        m += w * mk
        acc += w
        depth += w * t
        T *= 1.0 - alpha
    trans.append(T)
    return c + T * np.asarray(bg), m, depth / max(acc, 1e-6), acc, trans


def flood_fill_components(labels, background=-1):
    """4-connected components via BFS; returns a set of (label, frozenset(pixels))."""
    h, w = labels.shape
    seen = np.zeros((h, w), dtype=bool)
    out = set()
    for r in range(h):
        for c in range(w):
            if seen[r, c] or labels[r, c] == background:
                continue
            lab = labels[r, c]
            comp = []
            dq = deque([(r, c)])
            seen[r, c] = True
            while dq:
                y, x = dq.popleft()
                comp.append((y, x))
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and not seen[yy, xx] and labels[yy, xx] == lab:
                        seen[yy, xx] = True
                        dq.append((yy, xx))
            out.add((int(lab), frozenset(comp)))
    return out


def pinhole_ray(rotation, translation, fx, fy, cx, cy, row, col):
    """Ray through a pixel centre by inverting the full projection matrix.

    World to OpenCV-style camera (x right, y down, z forward) is
    ``diag(1, -1, -1) R^T (p - t)``; homogeneous pixel ``K`` times that.
    """
    K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
    flip = np.diag([1.0, -1.0, -1.0])
    M = K @ flip @ np.asarray(rotation).T
    P = np.hstack([M, -(M @ np.asarray(translation))[:, None]])
    # camera centre is the null space of P
    _, _, vt = np.linalg.svd(P)
    c = vt[-1]
    origin = c[:3] / c[3]
    d = np.linalg.solve(M, np.array([col, row, 1.0]))
    return origin, d / np.linalg.norm(d)
