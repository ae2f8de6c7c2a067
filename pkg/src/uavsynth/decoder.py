"""Small MLP decoders from fused plane features to density, colour and mask.

Forward passes return a cache consumed by :func:`decode_backward`; gradients
are derived by hand (no autodiff framework).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .plane_field import FieldSample, ModeError

NUM_FREQS = 4
DIR_ENC_DIM = 3 + 3 * 2 * NUM_FREQS


def encode_direction(d) -> np.ndarray:
    """``d`` followed by ``sin, cos`` of ``2^k pi d`` for ``k = 0..3`` (27 dims)."""
    d = np.asarray(d, dtype=np.float64)
    parts = [d]
    for k in range(NUM_FREQS):
        x = (2.0 ** k) * np.pi * d
        parts.append(np.sin(x))
        parts.append(np.cos(x))
    return np.concatenate(parts, axis=-1)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# (name, fan_in, fan_out, relu-follows) for each linear layer
def _layout(mode: str, feat: int, hidden: int):
    layers = [
        ("density.0", feat, hidden, True),
        ("density.1", hidden, 1, False),
        ("color.0", feat + DIR_ENC_DIM, hidden, True),
        ("color.1", hidden, 3, False),
    ]
    if mode == "extended":
        layers = [("fusion.0", 2 * feat + 3, hidden, True),
                  ("fusion.1", hidden, feat, False)] + layers + [("mask.0", 3, 1, False)]
    return layers


@dataclass
class DecoderParams:
    mode: str
    feature_size: int
    hidden: int
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        for name, fin, fout, _ in _layout(self.mode, self.feature_size, self.hidden):
            w, b = self.arrays.get(f"{name}.w"), self.arrays.get(f"{name}.b")
            if w is None or b is None:
                raise ValueError(f"decoder is missing layer {name}")
            if w.shape != (fin, fout) or b.shape != (fout,):
                raise ValueError(f"layer {name}: expected {(fin, fout)}/{(fout,)}, "
                                 f"got {w.shape}/{b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {name} has non-finite weights")

    @classmethod
    def create(cls, mode: str, feature_size: int, hidden: int = 64, rng=None,
               dtype=np.float32, density_bias: float = 0.0) -> "DecoderParams":
        """Fan-in scaled uniform weights; zero biases except the density output."""
        rng = np.random.default_rng(rng)
        arrays = {}
        for name, fin, fout, relu in _layout(mode, feature_size, hidden):
            bound = np.sqrt((6.0 if relu else 3.0) / fin)
            arrays[f"{name}.w"] = rng.uniform(-bound, bound, size=(fin, fout)).astype(dtype)
            arrays[f"{name}.b"] = np.zeros(fout, dtype=dtype)
        arrays["density.1.b"][:] = density_bias
        return cls(mode, feature_size, hidden, arrays)

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"decoder/{k}": v for k, v in self.arrays.items()}

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.mode, self.feature_size, self.hidden,
                             {k: v.copy() for k, v in self.arrays.items()})


def _linear(p, name, x):
    return x @ p[f"{name}.w"] + p[f"{name}.b"]


def decode_forward(sample: FieldSample, dir_enc: np.ndarray, params: DecoderParams):
    """Evaluate density, colour and mask for ``N`` samples.

    ``dir_enc`` is the encoded view direction per sample, ``(N, 27)``.
    Returns ``(sigma, rgb, mask, cache)``.
    """
    p = params.arrays
    dt = p["density.0.w"].dtype
    cache = {}
    if params.mode == "extended":
        if sample.f_s is None:
            raise ModeError("extended decoder needs an extended-mode sample")
        x = np.concatenate([sample.f_s, sample.f_d, sample.mask_logits], axis=1).astype(dt, copy=False)
        h = _linear(p, "fusion.0", x)
        hr = np.maximum(h, 0)
        feat = _linear(p, "fusion.1", hr)
        cache.update(fusion_x=x, fusion_h=h, fusion_hr=hr)
        mpre = _linear(p, "mask.0", sample.mask_logits.astype(dt, copy=False))[:, 0]
        mask = sigmoid(mpre)
        cache.update(mask_in=sample.mask_logits.astype(dt, copy=False), mask=mask)
    else:
        if sample.f is None:
            raise ModeError(f"{params.mode} decoder needs a fused feature f")
        feat = sample.f.astype(dt, copy=False)
        mask = np.zeros(len(feat), dtype=dt)
    hd = _linear(p, "density.0", feat)
    hdr = np.maximum(hd, 0)
    spre = _linear(p, "density.1", hdr)[:, 0]
    sigma = softplus(spre)
    xc = np.concatenate([feat, dir_enc.astype(dt, copy=False)], axis=1)
    hc = _linear(p, "color.0", xc)
    hcr = np.maximum(hc, 0)
    cpre = _linear(p, "color.1", hcr)
    rgb = sigmoid(cpre)
    cache.update(feat=feat, hd=hd, hdr=hdr, spre=spre, xc=xc, hc=hc, hcr=hcr, rgb=rgb)
    return sigma, rgb, mask, cache


def decode(sample: FieldSample, d, params: DecoderParams, mode: str | None = None):
    """Density, colour and mask for a sample and a unit view direction ``d``."""
    if mode is not None and mode != params.mode:
        raise ModeError(f"decoder built for {params.mode!r}, asked for {mode!r}")
    enc = encode_direction(np.asarray(d, dtype=np.float64))
    enc = np.broadcast_to(enc, (len(sample), DIR_ENC_DIM))
    sigma, rgb, mask, _ = decode_forward(sample, enc, params)
    return sigma, rgb, mask


def _linear_back(p, grads, name, x, gy):
    grads[f"{name}.w"] = x.T @ gy
    grads[f"{name}.b"] = gy.sum(axis=0)
    return gy @ p[f"{name}.w"].T


def decode_backward(cache: dict, params: DecoderParams, g_sigma, g_rgb, g_mask):
    """Backprop output gradients through the decoder.

    Returns ``(param_grads, input_grads)`` where ``input_grads`` holds ``f`` or
    ``f_s``, ``f_d`` and ``mask_logits`` gradients.
    """
    p = params.arrays
    dt = p["density.0.w"].dtype
    grads: dict[str, np.ndarray] = {}
    g_sigma = np.asarray(g_sigma, dtype=dt)
    g_rgb = np.asarray(g_rgb, dtype=dt)
    # colour head
    rgb = cache["rgb"]
    g_cpre = g_rgb * rgb * (1 - rgb)
    g_hcr = _linear_back(p, grads, "color.1", cache["hcr"], g_cpre)
    g_hc = g_hcr * (cache["hc"] > 0)
    g_xc = _linear_back(p, grads, "color.0", cache["xc"], g_hc)
    feat_dim = cache["feat"].shape[1]
    g_feat = g_xc[:, :feat_dim].copy()
    # density head
    g_spre = (g_sigma * sigmoid(cache["spre"]))[:, None]
    g_hdr = _linear_back(p, grads, "density.1", cache["hdr"], g_spre)
    g_hd = g_hdr * (cache["hd"] > 0)
    g_feat += _linear_back(p, grads, "density.0", cache["feat"], g_hd)
    if params.mode != "extended":
        return grads, {"f": g_feat}
    # fusion and mask heads
    g_hr = _linear_back(p, grads, "fusion.1", cache["fusion_hr"], g_feat)
    g_h = g_hr * (cache["fusion_h"] > 0)
    g_x = _linear_back(p, grads, "fusion.0", cache["fusion_x"], g_h)
    F = feat_dim
    m = cache["mask"]
    g_mpre = (np.asarray(g_mask, dtype=dt) * m * (1 - m))[:, None]
    g_mlog = _linear_back(p, grads, "mask.0", cache["mask_in"], g_mpre)
    return grads, {"f_s": g_x[:, :F], "f_d": g_x[:, F:2 * F],
                   "mask_logits": g_x[:, 2 * F:] + g_mlog}
