"""Losses, gradient routing, Adam updates and the training loop.

The total loss is a weighted sum of

* ``photometric``: mean squared error of rendered against target colour,
* ``mask_bce``: binary cross-entropy of the rendered mask against the
  per-pixel dynamic flag (extended mode only),
* ``cosine_sep``: mean over field samples of the summed absolute cosine
  similarity between static and dynamic spatial plane vectors (extended only),
* ``tv_spatial`` / ``tv_temporal``: mean squared differences of neighbouring
  plane cells (spatial planes along both axes, temporal planes along time).

With routing on, photometric and mask gradients of static pixels never reach
the dynamic planes and those of dynamic pixels never reach the static planes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .decoder import DecoderParams
from .plane_field import PlaneStack, cosine_separation_loss
from .renderer import RenderSettings, backward_rays, render_image, render_rays
from .scene_model import RayBundle, SceneBounds, rays_for_pose

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
BCE_EPS = 1e-6
PSNR_CAP = 99.0
LOSS_TERMS = ("photometric", "mask_bce", "cosine_sep", "tv_spatial", "tv_temporal")


class ConfigError(ValueError):
    """Training configuration incompatible with the model or data."""


@dataclass
class LossWeights:
    photometric: float = 1.0
    cosine_sep: float = 1e-3
    mask_bce: float = 1e-2
    tv_spatial: float = 2e-4
    tv_temporal: float = 1e-3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "LossWeights":
        """Defaults with the extended-only terms switched off outside extended mode."""
        base = {} if mode == "extended" else {"cosine_sep": 0.0, "mask_bce": 0.0}
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def check_weights(mode: str, weights: LossWeights) -> None:
    if mode != "extended" and (weights.cosine_sep > 0 or weights.mask_bce > 0):
        raise ConfigError(f"cosine_sep and mask_bce need extended mode, model is {mode!r}")


@dataclass
class TrainState:
    stack: PlaneStack
    decoder: DecoderParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0

    @classmethod
    def create(cls, stack: PlaneStack, decoder: DecoderParams, seed: int = 0) -> "TrainState":
        if stack.mode != decoder.mode:
            raise ConfigError(f"stack mode {stack.mode!r} != decoder mode {decoder.mode!r}")
        params = {**stack.parameters(), **decoder.parameters()}
        return cls(stack, decoder, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, int(seed))

    @property
    def mode(self) -> str:
        return self.stack.mode

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.stack.parameters(), **self.decoder.parameters()}

    def copy(self) -> "TrainState":
        return TrainState(self.stack.copy(), self.decoder.copy(),
                          {k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()}, self.step, self.seed)

    def astype(self, dtype) -> "TrainState":
        out = self.copy()
        for name, arr in out.parameters().items():
            _set_param(out, name, arr.astype(dtype))
        out.m = {k: a.astype(dtype) for k, a in out.m.items()}
        out.v = {k: a.astype(dtype) for k, a in out.v.items()}
        return out


def _set_param(state: TrainState, name: str, value: np.ndarray) -> None:
    if name.startswith("decoder/"):
        state.decoder.arrays[name[len("decoder/"):]] = value
    else:
        _, k, group, pair = name.split("/")
        state.stack.scales[int(k)][group][pair].values = value


@dataclass
class PixelBatch:
    rays: RayBundle
    target: np.ndarray        # (B, 3) in [0, 1]
    dynamic_flag: np.ndarray  # (B,) in {0, 1}

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        self.dynamic_flag = np.asarray(self.dynamic_flag)
        if len(self.rays) == 0:
            raise ValueError("empty pixel batch")
        if self.target.shape != (len(self.rays), 3):
            raise ValueError(f"target shape {self.target.shape} != ({len(self.rays)}, 3)")
        if not np.isin(self.dynamic_flag, (0, 1)).all():
            raise ValueError("dynamic_flag must be 0 or 1")

    def __len__(self):
        return len(self.rays)


# -- regularisers -------------------------------------------------------------

def total_variation(stack: PlaneStack, grads: dict | None = None, w_spatial: float = 1.0,
                    w_temporal: float = 1.0) -> tuple[float, float]:
    """``(tv_spatial, tv_temporal)``; adds weighted gradients into ``grads`` when given."""
    tv_s = tv_t = 0.0
    for name, _, _, plane in stack.planes():
        p = plane.values.astype(np.float64)
        axes = (1,) if plane.is_temporal else (0, 1)
        for ax in axes:
            d = np.diff(p, axis=ax)
            val = float(np.mean(d * d))
            w = w_temporal if plane.is_temporal else w_spatial
            if plane.is_temporal:
                tv_t += val
            else:
                tv_s += val
            if grads is not None and w > 0:
                g = (2.0 * w / d.size) * d
                acc = np.zeros_like(p)
                if ax == 0:
                    acc[1:] += g
                    acc[:-1] -= g
                else:
                    acc[:, 1:] += g
                    acc[:, :-1] -= g
                grads[name] = grads[name] + acc.astype(grads[name].dtype)
    return tv_s, tv_t


def bce(pred, target) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``pred`` (zero where clipped)."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    g = (-(y / p) + (1 - y) / (1 - p)) / len(p)
    g[(pred < BCE_EPS) | (pred > 1.0 - BCE_EPS)] = 0.0
    return float(loss), g


# -- loss and gradients -------------------------------------------------------

def _evaluate(state: TrainState, batch: PixelBatch, weights: LossWeights,
              settings: RenderSettings, rng=None, routing: bool = False,
              need_grad: bool = True):
    check_weights(state.mode, weights)
    extended = state.mode == "extended"
    out, tape = render_rays(state.stack, state.decoder, batch.rays, settings, rng,
                            keep_tape=need_grad or extended)
    B = len(batch)
    losses = dict.fromkeys(LOSS_TERMS, 0.0)
    resid = out["rgb"] - batch.target
    losses["photometric"] = float(np.mean(resid * resid))
    g_rgb = (2.0 * weights.photometric / resid.size) * resid
    g_mask = np.zeros(B)
    if extended:
        losses["mask_bce"], gm = bce(out["mask"], batch.dynamic_flag)
        g_mask = weights.mask_bce * gm
    cos_grads = None
    if extended and tape is not None:
        if need_grad and weights.cosine_sep > 0:
            losses["cosine_sep"], cg = cosine_separation_loss(tape.sample, return_grad=True)
            cos_grads = {k: weights.cosine_sep * g for k, g in cg.items()}
        else:
            losses["cosine_sep"] = cosine_separation_loss(tape.sample)
    grads = None
    if need_grad:
        if tape is None:
            grads = {k: np.zeros_like(a) for k, a in state.parameters().items()}
        else:
            sg = dg = None
            if routing and extended:
                flag = batch.dynamic_flag.astype(np.float64)
                sg, dg = 1.0 - flag, flag
            grads = backward_rays(state.stack, state.decoder, tape, g_rgb, g_mask, sg, dg,
                                  per_plane_grads=cos_grads)
    losses["tv_spatial"], losses["tv_temporal"] = total_variation(
        state.stack, grads, weights.tv_spatial, weights.tv_temporal)
    losses["total"] = sum(getattr(weights, k) * losses[k] for k in LOSS_TERMS)
    return losses, grads, out


def compute_losses(state: TrainState, batch: PixelBatch, weights: LossWeights,
                   settings: RenderSettings, rng=None) -> dict[str, float]:
    """Named loss terms plus their weighted ``total``."""
    losses, _, _ = _evaluate(state, batch, weights, settings, rng, need_grad=False)
    return losses


def compute_gradients(state: TrainState, batch: PixelBatch, weights: LossWeights,
                      settings: RenderSettings, rng=None, routing: bool = False):
    """``(losses, grads)`` with ``grads`` keyed like :meth:`TrainState.parameters`."""
    losses, grads, _ = _evaluate(state, batch, weights, settings, rng, routing)
    return losses, grads


def _check_finite(losses: dict) -> None:
    for k, v in losses.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss term {k!r} = {v}")


def adam_update(state: TrainState, grads: dict, lr: float) -> None:
    """One Adam step in place; entries with an exactly zero gradient are left untouched."""
    t = state.step + 1
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in state.parameters().items():
        g = np.asarray(grads[name], dtype=p.dtype)
        live = g != 0
        if not live.any():
            continue
        m, v = state.m[name], state.v[name]
        np.copyto(m, BETA1 * m + (1 - BETA1) * g, where=live)
        np.copyto(v, BETA2 * v + (1 - BETA2) * g * g, where=live)
        step = (lr / c1) * m / (np.sqrt(v / c2) + ADAM_EPS)
        np.copyto(p, p - step.astype(p.dtype), where=live)


def train_step(state: TrainState, batch: PixelBatch, weights: LossWeights,
               settings: RenderSettings, routing: bool = True, lr: float = 1e-3, rng=None):
    """Forward, backward and Adam update in place. Returns ``(state, losses)``."""
    if rng is None and settings.stratified:
        rng = np.random.default_rng([state.seed, state.step])
    losses, grads, _ = _evaluate(state, batch, weights, settings, rng, routing)
    _check_finite(losses)
    adam_update(state, grads, lr)
    state.step += 1
    return state, losses


# -- gradient checking --------------------------------------------------------

def finite_difference_check(f, grad, x: np.ndarray, indices, h: float = 1e-4) -> float:
    """Max relative error between ``grad`` and central differences of scalar ``f`` at ``x``.

    ``x`` is perturbed in place and restored.
    """
    worst = 0.0
    flat = x.reshape(-1)
    gflat = np.asarray(grad).reshape(-1)
    for i in indices:
        x0 = flat[i]
        flat[i] = x0 + h
        fp = f()
        flat[i] = x0 - h
        fm = f()
        flat[i] = x0
        num = (fp - fm) / (2 * h)
        a = gflat[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst


def gradient_check(state: TrainState, batch: PixelBatch, weights: LossWeights,
                   settings: RenderSettings, h: float = 1e-4, subset_size: int = 64,
                   seed: int = 0, routing: bool = False, names=None) -> float:
    """Max relative error of analytic gradients against central differences.

    Runs on a float64 copy with deterministic sampling; checks ``subset_size``
    random entries drawn from the parameters in ``names`` (all by default).
    """
    st = state.astype(np.float64)
    settings = RenderSettings(**{**settings.__dict__, "stratified": False})
    _, grads = compute_gradients(st, batch, weights, settings, routing=routing)
    params = st.parameters()
    names = sorted(names or params)
    sizes = np.array([params[n].size for n in names])
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes.sum(), size=min(subset_size, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0

    def f():
        return compute_losses(st, batch, weights, settings)["total"]

    for pick in np.sort(picks):
        j = int(np.searchsorted(offsets, pick, side="right") - 1)
        name = names[j]
        worst = max(worst, finite_difference_check(f, grads[name], params[name],
                                                   [int(pick - offsets[j])], h))
    return worst


# -- data and the training loop -----------------------------------------------

def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in ``[0, 1]``, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass
class TrainingData:
    """Every training pixel as a ray with its target colour and dynamic flag."""

    rays: RayBundle
    target: np.ndarray
    dynamic_flag: np.ndarray
    bounds: SceneBounds
    eval_frames: list = field(default_factory=list)  # [(pose, image float (H, W, 3))]

    @classmethod
    def from_frames(cls, train_frames, bounds: SceneBounds, eval_frames=()) -> "TrainingData":
        from .dataset_io import dynamic_flags

        rays, tgt, flags = [], [], []
        for fr in train_frames:
            rays.append(rays_for_pose(fr.pose, bounds))
            tgt.append(fr.image.reshape(-1, 3).astype(np.float64) / 255.0)
            flags.append(dynamic_flags(fr).reshape(-1))
        return cls(RayBundle.concatenate(rays), np.concatenate(tgt), np.concatenate(flags),
                   bounds, [(fr.pose, fr.image.astype(np.float64) / 255.0) for fr in eval_frames])

    @property
    def has_boxes(self) -> bool:
        return bool(self.dynamic_flag.any())

    def __len__(self):
        return len(self.target)

    def batch(self, idx) -> PixelBatch:
        return PixelBatch(self.rays[idx], self.target[idx], self.dynamic_flag[idx])

    def sample(self, rng: np.random.Generator, size: int) -> PixelBatch:
        return self.batch(rng.integers(0, len(self), size=size))


@dataclass
class Schedule:
    iterations: int = 2000
    batch_size: int = 1024
    lr: float = 1e-3
    lr_final_ratio: float = 0.1
    n_samples: int = 128
    eval_samples: int = 192
    eval_every: int = 0
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    routing: bool = True
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1 or self.n_samples < 1:
            raise ConfigError("batch_size and n_samples must be >= 1")

    def lr_at(self, step: int) -> float:
        """Cosine decay from ``lr`` to ``lr * lr_final_ratio`` over the schedule."""
        if self.iterations <= 1:
            return self.lr
        frac = min(step / (self.iterations - 1), 1.0)
        lo = self.lr * self.lr_final_ratio
        return lo + (self.lr - lo) * 0.5 * (1.0 + math.cos(math.pi * frac))

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_psnr(state: TrainState, frames, bounds: SceneBounds, n_samples: int = 192,
                  background=(0.0, 0.0, 0.0), threads: int = 1) -> list[float]:
    """Per-image PSNR of deterministic renders against ``(pose, image)`` pairs."""
    settings = RenderSettings(bounds, n_samples, False, 0, tuple(background), threads=threads)
    return [psnr(np.clip(render_image(state.stack, state.decoder, pose, None, settings).rgb, 0, 1),
                 img) for pose, img in frames]


def train(state: TrainState, data: TrainingData, schedule: Schedule,
          weights: LossWeights | None = None, on_record=None, checkpoint_extra=None):
    """Run ``schedule.iterations`` steps. Returns ``(state, psnr_curve, loss_history)``.

    ``psnr_curve`` holds ``(step, mean held-out PSNR)`` pairs; ``on_record`` is
    called with one dict per step (and per evaluation).
    """
    weights = weights or LossWeights.for_mode(state.mode)
    check_weights(state.mode, weights)
    if state.mode == "extended" and weights.mask_bce > 0 and not data.has_boxes:
        log.warning("mask supervision requested but the data has no dynamic boxes")
    settings = RenderSettings(data.bounds, schedule.n_samples, True, state.seed,
                              tuple(schedule.background))
    rng = np.random.default_rng([state.seed, 1])
    curve, history = [], []
    for it in range(schedule.iterations):
        batch = data.sample(rng, schedule.batch_size)
        _, losses = train_step(state, batch, weights, settings, schedule.routing,
                               schedule.lr_at(it))
        rec = {"step": state.step, **losses}
        history.append(rec)
        if on_record:
            on_record(rec)
        last = it == schedule.iterations - 1
        if data.eval_frames and schedule.eval_every and (
                (it + 1) % schedule.eval_every == 0 or last):
            p = float(np.mean(evaluate_psnr(state, data.eval_frames, data.bounds,
                                            schedule.eval_samples, schedule.background)))
            curve.append((state.step, p))
            if on_record:
                on_record({"step": state.step, "eval_psnr": p})
        if schedule.checkpoint_path and schedule.checkpoint_every and (
                (it + 1) % schedule.checkpoint_every == 0 or last):
            from .checkpoint import save_checkpoint

            save_checkpoint(state, schedule.checkpoint_path, checkpoint_extra)
    return state, curve, history
