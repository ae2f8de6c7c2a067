"""Quadrature volume rendering through a plane field, with its adjoint.

Samples are placed at the centres of ``n`` equal bins over ``[near, far]``
(or jittered inside them). Sample ``i`` covers ``[t_i, t_{i+1})`` and the last
one covers ``[t_n, far)``. Compositing is the usual

    alpha_i = 1 - exp(-sigma_i delta_i),   T_i = prod_{j<i} (1 - alpha_j)
    C = sum_i T_i alpha_i c_i + T_{n+1} background
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .decoder import DIR_ENC_DIM, DecoderParams, decode_backward, decode_forward, encode_direction
from .plane_field import (PlaneStack, field_backward, normalize_point, sample_field,
                          scatter_plane_grads)
from .scene_model import CameraPose, Ray, RayBundle, SceneBounds, rays_for_pose

DEPTH_EPS = 1e-6


@dataclass
class RaySamples:
    positions: np.ndarray  # (n, 3)
    deltas: np.ndarray     # (n,)
    ts: np.ndarray         # (n,)

    def __len__(self):
        return len(self.ts)


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: float
    acc: float
    mask: float
    transmittance: np.ndarray | None = None  # T_1..T_{n+1}


@dataclass
class RenderSettings:
    bounds: SceneBounds
    n_samples: int = 192
    stratified: bool = False
    seed: int = 0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    chunk: int = 4096
    threads: int = 1


@dataclass
class RenderedImage:
    rgb: np.ndarray    # (H, W, 3)
    depth: np.ndarray  # (H, W)
    acc: np.ndarray    # (H, W)
    mask: np.ndarray   # (H, W)


def sample_bins(near, far, n: int, rng: np.random.Generator | None = None):
    """Sample positions ``ts`` and segment lengths ``deltas``, both ``(R, n)``."""
    if n < 1:
        raise ValueError("need at least one sample per ray")
    near = np.asarray(near, dtype=np.float64)[:, None]
    far = np.asarray(far, dtype=np.float64)[:, None]
    width = (far - near) / n
    offs = 0.5 if rng is None else rng.random((near.shape[0], n))
    ts = near + (np.arange(n) + offs) * width
    deltas = np.empty_like(ts)
    deltas[:, :-1] = ts[:, 1:] - ts[:, :-1]
    deltas[:, -1] = far[:, 0] - ts[:, -1]
    return ts, deltas


def sample_along_ray(ray: Ray, n: int, stratified: bool = False, rng_seed=None) -> RaySamples:
    if ray.empty:
        return RaySamples(np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    rng = np.random.default_rng(rng_seed) if stratified else None
    ts, deltas = sample_bins([ray.near], [ray.far], n, rng)
    return RaySamples(ray.at(ts[0]), deltas[0], ts[0])


def composite(sigmas, rgbs, masks, deltas, background=(0.0, 0.0, 0.0), ts=None) -> RenderOutput:
    """Alpha-composite one ray's samples."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(sigmas < 0):
        raise ValueError("densities must be non-negative")
    n = len(sigmas)
    bg = np.asarray(background, dtype=np.float64)
    if n == 0:
        return RenderOutput(bg.copy(), 0.0, 0.0, 0.0, np.ones(1))
    ts = np.cumsum(deltas) - deltas if ts is None else np.asarray(ts, dtype=np.float64)
    rgb, mask, depth, acc, _, trans, tfin = kernels.composite_forward(
        sigmas[None], np.asarray(deltas, dtype=np.float64)[None], ts[None],
        np.asarray(rgbs, dtype=np.float64)[None], np.asarray(masks, dtype=np.float64)[None], bg)
    return RenderOutput(rgb[0], float(depth[0]), float(acc[0]), float(mask[0]),
                        np.append(trans[0], tfin[0]))


@dataclass
class Tape:
    """Everything the backward pass needs from one forward pass."""

    hit: np.ndarray
    n: int
    q: np.ndarray
    sample: object
    dec_cache: dict
    sigma: np.ndarray
    rgb: np.ndarray
    mask: np.ndarray
    deltas: np.ndarray
    comp: tuple
    background: np.ndarray
    extra: dict = field(default_factory=dict)


def render_rays(stack: PlaneStack, decoder: DecoderParams, rays: RayBundle,
                settings: RenderSettings, rng: np.random.Generator | None = None,
                keep_tape: bool = False):
    """Render a bundle. Returns ``(outputs, tape)``; ``tape`` is ``None`` unless requested.

    ``outputs`` holds ``rgb (R, 3)``, ``depth``, ``acc``, ``mask`` (each ``(R,)``)
    and ``t_final``. Rays that miss the scene box render the background.
    """
    R = len(rays)
    n = settings.n_samples
    bg = np.asarray(settings.background, dtype=np.float64)
    out = {"rgb": np.broadcast_to(bg, (R, 3)).copy(), "depth": np.zeros(R), "acc": np.zeros(R),
           "mask": np.zeros(R), "t_final": np.ones(R)}
    hit = np.flatnonzero(rays.hit)
    if len(hit) == 0:
        return out, None
    sub = rays[hit]
    ts, deltas = sample_bins(sub.near, sub.far, n, rng if settings.stratified else None)
    pos = sub.origins[:, None, :] + ts[:, :, None] * sub.directions[:, None, :]
    q = normalize_point(pos.reshape(-1, 3), np.repeat(sub.times, n), settings.bounds, check=False)
    np.clip(q, 0.0, 1.0, out=q)
    sample = sample_field(stack, q)
    enc = np.repeat(encode_direction(sub.directions), n, axis=0)
    sigma, rgb, mask, cache = decode_forward(sample, enc, decoder)
    m = len(hit)
    comp = kernels.composite_forward(sigma.reshape(m, n), deltas, ts, rgb.reshape(m, n, 3),
                                     mask.reshape(m, n), bg)
    c_rgb, c_mask, c_depth, c_acc, _, _, c_tfin = comp
    out["rgb"][hit] = c_rgb
    out["mask"][hit] = c_mask
    out["depth"][hit] = c_depth
    out["acc"][hit] = c_acc
    out["t_final"][hit] = c_tfin
    tape = None
    if keep_tape:
        tape = Tape(hit, n, q, sample, cache, sigma.reshape(m, n), rgb.reshape(m, n, 3),
                    mask.reshape(m, n), deltas, comp, bg)
    return out, tape


def backward_rays(stack: PlaneStack, decoder: DecoderParams, tape: Tape, g_rgb, g_mask=None,
                  static_gate=None, dynamic_gate=None, per_plane_grads=None,
                  g_acc=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every plane and decoder parameter.

    ``g_rgb`` / ``g_mask`` / ``g_acc`` are loss gradients for all ``R`` rays of the
    forward bundle. ``static_gate`` and ``dynamic_gate`` are optional per-ray
    multipliers (``(R,)``) on gradients entering the static and dynamic plane
    sets (extended mode). ``per_plane_grads`` are extra per-sample plane-vector
    gradients added ungated.
    """
    hit, n = tape.hit, tape.n
    m = len(hit)
    g_rgb = np.asarray(g_rgb, dtype=np.float64)[hit]
    g_mask = np.zeros(m) if g_mask is None else np.asarray(g_mask, dtype=np.float64)[hit]
    g_acc = np.zeros(m) if g_acc is None else np.asarray(g_acc, dtype=np.float64)[hit]
    _, _, _, _, weights, trans, tfin = tape.comp
    g_sigma, g_rgbs, g_masks = kernels.composite_backward(
        tape.sigma, tape.deltas, tape.rgb, tape.mask, weights, trans, tfin, tape.background,
        g_rgb, g_mask, g_acc)
    dgrads, ingrads = decode_backward(tape.dec_cache, decoder, g_sigma.reshape(-1),
                                      g_rgbs.reshape(-1, 3), g_masks.reshape(-1))
    grads = {f"decoder/{k}": v for k, v in dgrads.items()}

    def gate(g, per_ray):
        if per_ray is None or g is None:
            return g
        w = np.repeat(np.asarray(per_ray, dtype=g.dtype)[hit], n)
        return g * w[:, None]

    vec = field_backward(
        stack, tape.sample,
        grad_f=ingrads.get("f"),
        grad_f_s=gate(ingrads.get("f_s"), static_gate),
        grad_f_d=gate(ingrads.get("f_d"), dynamic_gate),
        grad_mask_logits=gate(ingrads.get("mask_logits"), dynamic_gate),
        per_plane_grads=per_plane_grads)
    scatter_plane_grads(stack, tape.q, vec, into=grads)
    for name, arr in stack.parameters().items():
        if name not in grads:
            grads[name] = np.zeros_like(arr)
    return grads


def render_image(stack: PlaneStack, decoder: DecoderParams, pose: CameraPose,
                 tau: float | None, settings: RenderSettings) -> RenderedImage:
    """Render every pixel of ``pose`` at time ``tau`` (defaults to the pose's timestamp).

    Chunks are independent, so ``settings.threads > 1`` renders them in parallel
    without changing any pixel.
    """
    k = pose.intrinsics
    if k.width * k.height == 0:
        raise ValueError("cannot render a zero-size image")
    rays = rays_for_pose(pose, settings.bounds, tau)
    R = len(rays)
    chunks = [(s, min(s + settings.chunk, R)) for s in range(0, R, settings.chunk)]

    def work(i):
        s, e = chunks[i]
        rng = np.random.default_rng([settings.seed, i]) if settings.stratified else None
        out, _ = render_rays(stack, decoder, rays[s:e], settings, rng)
        return out

    if settings.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(settings.threads) as ex:
            parts = list(ex.map(work, range(len(chunks))))
    else:
        parts = [work(i) for i in range(len(chunks))]
    H, W = k.height, k.width
    cat = {key: np.concatenate([p[key] for p in parts]) for key in ("rgb", "depth", "acc", "mask")}
    return RenderedImage(cat["rgb"].reshape(H, W, 3), cat["depth"].reshape(H, W),
                         cat["acc"].reshape(H, W), cat["mask"].reshape(H, W))


__all__ = ["RaySamples", "RenderOutput", "RenderSettings", "RenderedImage", "Tape",
           "sample_bins", "sample_along_ray", "composite", "render_rays", "backward_rays",
           "render_image", "DIR_ENC_DIM"]
