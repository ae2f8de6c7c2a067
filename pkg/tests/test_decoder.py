import numpy as np
import pytest

from oracles import decode_direct, encode_direction_direct
from uavsynth.decoder import (DIR_ENC_DIM, DecoderParams, decode, decode_backward,
                              decode_forward, encode_direction, sigmoid, softplus)
from uavsynth.plane_field import ModeError, PlaneStack, sample_field


def _setup(mode, seed=0, n=7):
    rng = np.random.default_rng(seed)
    stack = PlaneStack.create(mode, 3, (4, 4, 4, 4), (1, 2), rng=seed, dtype=np.float64)
    for _, _, _, plane in stack.planes():
        plane.values[...] = rng.normal(size=plane.values.shape)
    dec = DecoderParams.create(mode, stack.feature_size, 6, rng=seed, dtype=np.float64,
                               density_bias=0.3)
    q = rng.uniform(size=(n, 4))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return stack, dec, sample_field(stack, q), d


def test_direction_encoding():
    d = np.array([0.6, 0.0, -0.8])
    enc = encode_direction(d)
    assert enc.shape == (DIR_ENC_DIM,) == (27,)
    np.testing.assert_allclose(enc, encode_direction_direct(d), atol=1e-15)


def test_activations_are_stable():
    assert softplus(np.array([800.0]))[0] == 800.0
    assert softplus(np.array([-800.0]))[0] == 0.0
    assert sigmoid(np.array([-800.0]))[0] == 0.0
    assert sigmoid(np.array([0.0]))[0] == 0.5


class TestLayout:
    def test_extended_shapes(self):
        dec = DecoderParams.create("extended", 8, 16, rng=0)
        a = dec.arrays
        assert a["fusion.0.w"].shape == (2 * 8 + 3, 16)
        assert a["fusion.1.w"].shape == (16, 8)
        assert a["color.0.w"].shape == (8 + 27, 16)
        assert a["mask.0.w"].shape == (3, 1)

    def test_stock_has_no_fusion_or_mask(self):
        dec = DecoderParams.create("stock", 8, 16, rng=0)
        assert not any(k.startswith(("fusion", "mask")) for k in dec.arrays)

    def test_density_bias(self):
        dec = DecoderParams.create("stock", 4, 4, rng=0, density_bias=-1.5)
        assert np.all(dec.arrays["density.1.b"] == np.float32(-1.5))

    def test_rejects_wrong_shape_and_nonfinite(self):
        dec = DecoderParams.create("stock", 4, 4, rng=0)
        bad = dict(dec.arrays)
        bad["color.1.b"] = np.zeros(4)
        with pytest.raises(ValueError):
            DecoderParams("stock", 4, 4, bad)
        bad = dict(dec.arrays)
        bad["density.0.w"] = dec.arrays["density.0.w"] * np.nan
        with pytest.raises(ValueError):
            DecoderParams("stock", 4, 4, bad)


@pytest.mark.parametrize("mode", ["stock", "spatial_only", "extended"])
def test_forward_matches_direct_sums(mode):
    _, dec, s, d = _setup(mode)
    enc = encode_direction(d)
    sigma, rgb, mask, _ = decode_forward(s, enc, dec)
    for i in range(len(d)):
        feats = ({"f_s": s.f_s[i], "f_d": s.f_d[i], "mask_logits": s.mask_logits[i]}
                 if mode == "extended" else {"f": s.f[i]})
        rs, rc, rm = decode_direct(dec.arrays, mode, feats, d[i])
        assert sigma[i] == pytest.approx(rs, rel=1e-12)
        np.testing.assert_allclose(rgb[i], rc, rtol=1e-12)
        assert mask[i] == pytest.approx(rm, rel=1e-12, abs=1e-15)


def test_outputs_ranges():
    _, dec, s, d = _setup("extended")
    sigma, rgb, mask = decode(s, d[0], dec)
    assert np.all(sigma >= 0)
    assert np.all((rgb >= 0) & (rgb <= 1))
    assert np.all((mask >= 0) & (mask <= 1))


def test_decode_mode_check():
    _, dec, s, d = _setup("stock")
    with pytest.raises(ModeError):
        decode(s, d[0], dec, mode="extended")
    _, dec_e, _, _ = _setup("extended")
    with pytest.raises(ModeError):
        decode(s, d[0], dec_e)


@pytest.mark.parametrize("mode", ["stock", "extended"])
def test_backward_matches_finite_differences(mode):
    _, dec, s, d = _setup(mode, seed=3)
    enc = encode_direction(d)
    rng = np.random.default_rng(9)
    n = len(d)
    ws, wc, wm = rng.normal(size=n), rng.normal(size=(n, 3)), rng.normal(size=n)

    def objective(sample=s):
        sg, c, m, _ = decode_forward(sample, enc, dec)
        return np.sum(sg * ws) + np.sum(c * wc) + np.sum(m * wm)

    *_, cache = decode_forward(s, enc, dec)
    pgrads, igrads = decode_backward(cache, dec, ws, wc, wm)
    h = 1e-6
    for name, arr in dec.arrays.items():
        for _ in range(4):
            idx = tuple(int(rng.integers(0, k)) for k in arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            lp = objective()
            arr[idx] = old - h
            lm = objective()
            arr[idx] = old
            assert pgrads[name][idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-8)
    for key, g in igrads.items():
        x = getattr(s, key)
        for _ in range(4):
            idx = tuple(int(rng.integers(0, k)) for k in x.shape)
            old = x[idx]
            x[idx] = old + h
            lp = objective()
            x[idx] = old - h
            lm = objective()
            x[idx] = old
            assert g[idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-8), key
