"""Multi-resolution 2D feature planes over normalised space-time.

A 4D query ``q = (i, j, k, tau)`` in ``[0, 1]^4`` is projected onto each axis
pair, bilinearly interpolated, and the plane vectors are fused by elementwise
(Hadamard) product within a scale and concatenated across scales.

Three layouts are supported:

``stock``
    one set of six planes ``xy, xz, yz, xt, yt, zt``.
``spatial_only``
    the three spatial planes only; time is ignored.
``extended``
    a static set (``xy, xz, yz``) and a dynamic set (all six). The dynamic
    temporal planes carry one extra channel holding a mask logit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .scene_model import SceneBounds

AXIS_INDEX = {"x": 0, "y": 1, "z": 2, "t": 3}
SPATIAL_PAIRS = ("xy", "xz", "yz")
TEMPORAL_PAIRS = ("xt", "yt", "zt")
ALL_PAIRS = SPATIAL_PAIRS + TEMPORAL_PAIRS
MODES = ("stock", "extended", "spatial_only")

COS_EPS = 1e-12


class ModeError(ValueError):
    """Operation does not apply to the plane stack's mode."""


def mode_groups(mode: str) -> dict[str, tuple[str, ...]]:
    if mode == "stock":
        return {"main": ALL_PAIRS}
    if mode == "spatial_only":
        return {"main": SPATIAL_PAIRS}
    if mode == "extended":
        return {"static": SPATIAL_PAIRS, "dynamic": ALL_PAIRS}
    raise ModeError(f"unknown mode {mode!r}; expected one of {MODES}")


@dataclass
class PlaneGrid:
    axis_pair: str
    values: np.ndarray  # (R_u, R_v, feature_dim)

    def __post_init__(self):
        if self.axis_pair not in ALL_PAIRS:
            raise ValueError(f"unknown axis pair {self.axis_pair!r}")
        if self.values.ndim != 3 or min(self.values.shape[:2]) < 2:
            raise ValueError(f"plane needs shape (Ru>=2, Rv>=2, F), got {self.values.shape}")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[2]

    @property
    def is_temporal(self) -> bool:
        return self.axis_pair[1] == "t"

    def coords(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return q[:, AXIS_INDEX[self.axis_pair[0]]], q[:, AXIS_INDEX[self.axis_pair[1]]]


def interp_plane(plane: PlaneGrid, q) -> np.ndarray:
    """Interpolated feature(s) of ``plane`` at ``q`` (shape ``(4,)`` or ``(N, 4)``)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    out = kernels.interp_forward(plane.values, *plane.coords(q2))
    return out[0] if single else out


@dataclass
class PlaneStack:
    mode: str
    D: int
    base_resolution: tuple[int, int, int, int]
    scale_multipliers: tuple[int, ...]
    scales: list[dict[str, dict[str, PlaneGrid]]] = field(default_factory=list)

    @classmethod
    def create(cls, mode: str, D: int = 32, base_resolution=(128, 128, 64, 77),
               scale_multipliers=(1, 2, 4), rng=None, dtype=np.float32,
               init_range=(0.9, 1.1)) -> "PlaneStack":
        """Planes with uniform ``init_range`` values; the mask channel starts at 0."""
        if D < 1:
            raise ValueError("feature dimension D must be >= 1")
        rng = np.random.default_rng(rng)
        groups = mode_groups(mode)
        scales = []
        for mult in scale_multipliers:
            res = [int(r) * int(mult) for r in base_resolution[:3]] + [int(base_resolution[3])]
            level = {}
            for group, pairs in groups.items():
                planes = {}
                for pair in pairs:
                    ru, rv = res[AXIS_INDEX[pair[0]]], res[AXIS_INDEX[pair[1]]]
                    extra = mode == "extended" and pair in TEMPORAL_PAIRS
                    vals = rng.uniform(*init_range, size=(ru, rv, D + int(extra))).astype(dtype)
                    if extra:
                        vals[..., D] = 0
                    planes[pair] = PlaneGrid(pair, vals)
                level[group] = planes
            scales.append(level)
        return cls(mode, D, tuple(int(r) for r in base_resolution),
                   tuple(int(m) for m in scale_multipliers), scales)

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    @property
    def feature_size(self) -> int:
        """Length of a fused feature (``D * num_scales``)."""
        return self.D * self.num_scales

    def planes(self):
        """Yield ``(name, scale, group, PlaneGrid)`` in a fixed order."""
        for k, level in enumerate(self.scales):
            for group, planes in level.items():
                for pair, plane in planes.items():
                    yield f"planes/{k}/{group}/{pair}", k, group, plane

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: p.values for name, _, _, p in self.planes()}

    def group_names(self, group: str) -> list[str]:
        return [name for name, _, g, _ in self.planes() if g == group]

    def copy(self) -> "PlaneStack":
        return PlaneStack(self.mode, self.D, self.base_resolution, self.scale_multipliers,
                          [{g: {p: PlaneGrid(p, pl.values.copy()) for p, pl in planes.items()}
                            for g, planes in level.items()} for level in self.scales])


def normalize_point(p, tau, bounds: SceneBounds, check: bool = True) -> np.ndarray:
    """World point(s) and time(s) to ``q`` in ``[0, 1]^4``."""
    p = np.asarray(p, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if check:
        if not np.all(bounds.contains(p)):
            raise ValueError("point outside scene bounds")
        if np.any((tau < 0) | (tau > 1)):
            raise ValueError("timestamp outside [0, 1]")
    xyz = (p - bounds.min) / (bounds.max - bounds.min)
    t = np.broadcast_to(tau, xyz.shape[:-1])[..., None]
    return np.concatenate([xyz, t], axis=-1)


@dataclass
class FieldSample:
    """Batched field lookup over ``N`` points.

    ``stacks[(scale, group)]`` holds the interpolated feature vectors of that
    group's planes as one ``(P, N, D)`` array (planes in ``mode_groups`` order);
    ``per_plane[(scale, group, pair)]`` views the same data per plane.
    ``mask_raw[scale]`` is the ``(N, 3)`` mask channel of ``xt, yt, zt``.
    """

    f: np.ndarray | None = None
    f_s: np.ndarray | None = None
    f_d: np.ndarray | None = None
    mask_logits: np.ndarray | None = None
    stacks: dict = field(default_factory=dict)
    mask_raw: dict = field(default_factory=dict)

    @property
    def per_plane(self) -> dict:
        out = {}
        for (k, g), vecs in self.stacks.items():
            pairs = SPATIAL_PAIRS if len(vecs) == 3 else ALL_PAIRS
            for i, pair in enumerate(pairs):
                out[(k, g, pair)] = vecs[i]
        return out

    def __len__(self):
        for a in (self.f, self.f_s):
            if a is not None:
                return len(a)
        return next(iter(self.stacks.values())).shape[1]


def _lookup(stack: PlaneStack, q: np.ndarray):
    n = len(q)
    D = stack.D
    stacks, mask_raw = {}, {}
    for k, level in enumerate(stack.scales):
        for g, planes in level.items():
            plane_list = list(planes.values())
            dtype = plane_list[0].values.dtype
            vecs = np.empty((len(plane_list), n, D), dtype=dtype)
            for i, plane in enumerate(plane_list):
                u, v = plane.coords(q)
                kernels.interp_forward(plane.values, u, v, 0, vecs[i])
                if plane.feature_dim > D:
                    if k not in mask_raw:
                        mask_raw[k] = np.empty((n, 3), dtype=dtype)
                    col = np.empty((n, 1), dtype=dtype)
                    kernels.interp_forward(plane.values, u, v, D, col)
                    mask_raw[k][:, TEMPORAL_PAIRS.index(plane.axis_pair)] = col[:, 0]
            stacks[(k, g)] = vecs
    return stacks, mask_raw


def sample_stock(stack: PlaneStack, q) -> FieldSample:
    """Fused feature ``f`` (``(N, D * scales)``) for stock and spatial-only stacks."""
    if stack.mode not in ("stock", "spatial_only"):
        raise ModeError(f"sample_stock needs a stock or spatial_only stack, got {stack.mode!r}")
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    stacks, _ = _lookup(stack, q)
    f = np.concatenate([kernels.product_forward(stacks[(k, "main")])
                        for k in range(stack.num_scales)], axis=1)
    return FieldSample(f=f, stacks=stacks)


def sample_extended(stack: PlaneStack, q) -> FieldSample:
    """Static product, dynamic product and scale-averaged mask logits."""
    if stack.mode != "extended":
        raise ModeError(f"sample_extended needs an extended stack, got {stack.mode!r}")
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    stacks, mask_raw = _lookup(stack, q)
    S = stack.num_scales
    f_s = np.concatenate([kernels.product_forward(stacks[(k, "static")]) for k in range(S)], 1)
    f_d = np.concatenate([kernels.product_forward(stacks[(k, "dynamic")]) for k in range(S)], 1)
    logits = mask_raw[0].copy()
    for k in range(1, S):
        logits += mask_raw[k]
    logits /= S
    return FieldSample(f_s=f_s, f_d=f_d, mask_logits=logits, stacks=stacks, mask_raw=mask_raw)


def sample_field(stack: PlaneStack, q) -> FieldSample:
    return sample_extended(stack, q) if stack.mode == "extended" else sample_stock(stack, q)


@dataclass
class PlaneVectorGrads:
    """Gradients w.r.t. the interpolated vectors of a :class:`FieldSample`."""

    stacks: dict = field(default_factory=dict)  # (scale, group) -> (P, N, D)
    mask: dict = field(default_factory=dict)    # scale -> (N, 3)


def field_backward(stack: PlaneStack, sample: FieldSample, grad_f=None, grad_f_s=None,
                   grad_f_d=None, grad_mask_logits=None, per_plane_grads=None) -> PlaneVectorGrads:
    """Backprop fused-feature gradients to the per-plane interpolated vectors.

    ``per_plane_grads`` (keys ``(scale, group, pair)``) are added on top, e.g.
    from the cosine separation loss.
    """
    D = stack.D
    out = PlaneVectorGrads()
    for k in range(stack.num_scales):
        sl = slice(k * D, (k + 1) * D)
        if stack.mode == "extended":
            if grad_f_s is not None:
                out.stacks[(k, "static")] = kernels.product_backward(
                    sample.stacks[(k, "static")], grad_f_s[:, sl])
            if grad_f_d is not None:
                out.stacks[(k, "dynamic")] = kernels.product_backward(
                    sample.stacks[(k, "dynamic")], grad_f_d[:, sl])
            if grad_mask_logits is not None:
                out.mask[k] = grad_mask_logits / stack.num_scales
        elif grad_f is not None:
            out.stacks[(k, "main")] = kernels.product_backward(sample.stacks[(k, "main")],
                                                               grad_f[:, sl])
    for (k, g, pair), gv in (per_plane_grads or {}).items():
        vecs = sample.stacks[(k, g)]
        if (k, g) not in out.stacks:
            out.stacks[(k, g)] = np.zeros_like(vecs)
        pairs = SPATIAL_PAIRS if len(vecs) == 3 else ALL_PAIRS
        out.stacks[(k, g)][pairs.index(pair)] += gv.astype(vecs.dtype, copy=False)
    return out


def scatter_plane_grads(stack: PlaneStack, q: np.ndarray, vgrads: PlaneVectorGrads,
                        into: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Adjoint of interpolation: accumulate vector gradients into plane-shaped arrays."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    D = stack.D
    grads = into if into is not None else {}
    for k, level in enumerate(stack.scales):
        for g, planes in level.items():
            G = vgrads.stacks.get((k, g))
            M = vgrads.mask.get(k)
            for i, plane in enumerate(planes.values()):
                name = f"planes/{k}/{g}/{plane.axis_pair}"
                has_mask = M is not None and plane.feature_dim > D
                if G is None and not has_mask:
                    continue
                if name not in grads:
                    grads[name] = np.zeros_like(plane.values)
                u, v = plane.coords(q)
                if G is not None:
                    kernels.interp_backward(G[i], u, v, grads[name], 0)
                if has_mask:
                    col = M[:, TEMPORAL_PAIRS.index(plane.axis_pair)][:, None]
                    kernels.interp_backward(col, u, v, grads[name], D)
    return grads


def cosine_separation_loss(sample: FieldSample, return_grad: bool = False):
    """Mean over samples of ``sum |cos(static_c, dynamic_c)|`` over spatial pairs and scales.

    Zero-norm vectors contribute 0. With ``return_grad`` also returns per-plane
    vector gradients keyed like ``sample.per_plane``.
    """
    keys = sorted({k for (k, g, _) in sample.per_plane if g == "static"})
    if not keys:
        raise ModeError("cosine separation needs extended-mode samples")
    n = len(sample)
    total = 0.0
    grads = {}
    for k in keys:
        for p in SPATIAL_PAIRS:
            a = np.asarray(sample.per_plane[(k, "static", p)], dtype=np.float64)
            b = np.asarray(sample.per_plane[(k, "dynamic", p)], dtype=np.float64)
            na = np.linalg.norm(a, axis=1)
            nb = np.linalg.norm(b, axis=1)
            denom = np.maximum(na * nb, COS_EPS)
            dot = np.einsum("nd,nd->n", a, b)
            cos = dot / denom
            total += np.abs(cos).sum()
            if return_grad:
                live = (na * nb) > COS_EPS
                sgn = np.sign(cos) * live / n
                inv_a2 = np.where(live, 1.0 / np.maximum(na * na, COS_EPS), 0.0)
                inv_b2 = np.where(live, 1.0 / np.maximum(nb * nb, COS_EPS), 0.0)
                ga = sgn[:, None] * (b / denom[:, None] - (cos * inv_a2)[:, None] * a)
                gb = sgn[:, None] * (a / denom[:, None] - (cos * inv_b2)[:, None] * b)
                grads[(k, "static", p)] = ga
                grads[(k, "dynamic", p)] = gb
    loss = total / n
    return (loss, grads) if return_grad else loss
