import numpy as np
import pytest

from helpers import UNIT, homogeneous_field, random_rays
from oracles import composite_direct, decode_direct, field_direct
from uavsynth.decoder import DecoderParams
from uavsynth.plane_field import PlaneStack, normalize_point
from uavsynth.renderer import (RenderSettings, backward_rays, composite, render_image,
                               render_rays, sample_along_ray, sample_bins)
from uavsynth.scene_model import CameraPose, Intrinsics, Ray, RayBundle, intersect_box, look_at


class TestSampling:
    def test_uniform_bins(self):
        ts, d = sample_bins([0.0], [4.0], 4)
        np.testing.assert_allclose(ts[0], [0.5, 1.5, 2.5, 3.5])
        np.testing.assert_allclose(d[0], [1, 1, 1, 0.5])

    def test_single_bin(self):
        ts, d = sample_bins([1.0], [3.0], 1)
        assert ts[0, 0] == 2.0 and d[0, 0] == 1.0

    def test_stratified_stays_in_bins_and_is_seeded(self):
        ts, d = sample_bins(np.zeros(50), np.full(50, 8.0), 8, np.random.default_rng(0))
        assert np.all(np.floor(ts) == np.arange(8))
        assert np.all(d > 0) and np.all(d.sum(1) <= 8.0 + 1e-12)
        ts2, _ = sample_bins(np.zeros(50), np.full(50, 8.0), 8, np.random.default_rng(0))
        assert np.array_equal(ts, ts2)

    def test_rejects_zero_samples(self):
        with pytest.raises(ValueError):
            sample_bins([0.0], [1.0], 0)

    def test_sample_along_ray(self):
        ray = Ray(np.zeros(3), np.array([1.0, 0, 0]), 1.0, 3.0)
        s = sample_along_ray(ray, 4)
        np.testing.assert_allclose(s.positions[:, 0], s.ts)
        assert len(s) == 4
        assert len(sample_along_ray(Ray(np.zeros(3), np.array([1.0, 0, 0]), 0.0, 0.0,
                                          empty=True), 4)) == 0


class TestComposite:
    def test_opaque_front(self):
        out = composite([50.0, 1.0], [[0.1, 0.2, 0.3], [1, 1, 1]], [0.4, 1.0], [1.0, 1.0],
                        background=(1, 1, 1))
        np.testing.assert_allclose(out.rgb, [0.1, 0.2, 0.3], atol=1e-9)
        assert out.acc == pytest.approx(1.0, abs=1e-9)
        assert out.mask == pytest.approx(0.4, abs=1e-9)

    def test_empty_ray_is_background(self):
        out = composite([], np.zeros((0, 3)), [], [], background=(0.3, 0.2, 0.1))
        np.testing.assert_array_equal(out.rgb, [0.3, 0.2, 0.1])
        assert out.acc == 0.0

    def test_negative_density_rejected(self):
        with pytest.raises(ValueError):
            composite([-1.0], [[0, 0, 0]], [0], [1.0])

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 30))
            s, c, m = rng.exponential(2, n), rng.uniform(size=(n, 3)), rng.uniform(size=n)
            dl = rng.uniform(0.01, 0.3, n)
            ts = np.cumsum(dl)
            bg = rng.uniform(size=3)
            out = composite(s, c, m, dl, bg, ts)
            rc, rm, rd, ra, rt = composite_direct(s, c, m, dl, ts, bg)
            np.testing.assert_allclose(out.rgb, rc, atol=1e-12)
            assert out.mask == pytest.approx(rm, abs=1e-12)
            assert out.depth == pytest.approx(rd, abs=1e-12)
            assert out.acc == pytest.approx(ra, abs=1e-12)
            np.testing.assert_allclose(out.transmittance, rt, atol=1e-12)


def _closed_form(sigma, color, bg, length):
    e = np.exp(-sigma * length)
    return (1 - e) * np.asarray(color) + e * np.asarray(bg)


@pytest.mark.parametrize("n", [4, 64])
def test_homogeneous_medium_closed_form(n):
    sigma, color, bg = 0.8, (0.2, 0.5, 0.9), (0.1, 0.1, 0.3)
    stack, dec = homogeneous_field("stock", sigma, color)
    rays = random_rays(np.random.default_rng(n), 200)
    out, _ = render_rays(stack, dec, rays, RenderSettings(UNIT, n_samples=n, background=bg))
    # quadrature covers far - t_1 = L (1 - 1/(2n))
    length = (rays.far - rays.near) * (1 - 0.5 / n)
    ref = np.array([_closed_form(sigma, color, bg, L) for L in length])
    np.testing.assert_allclose(out["rgb"][rays.hit], ref[rays.hit], atol=1e-9)


def test_conservation_on_random_rays():
    rng = np.random.default_rng(1)
    stack = PlaneStack.create("extended", 4, (6, 6, 6, 5), (1, 2), rng=0, dtype=np.float64)
    dec = DecoderParams.create("extended", stack.feature_size, 16, rng=0, dtype=np.float64,
                               density_bias=1.0)
    rays = random_rays(rng, 10_000)
    out, _ = render_rays(stack, dec, rays, RenderSettings(UNIT, n_samples=16))
    assert np.abs(out["acc"] + out["t_final"] - 1).max() < 1e-9


def test_render_rays_matches_oracle_chain():
    rng = np.random.default_rng(2)
    stack = PlaneStack.create("extended", 2, (4, 4, 4, 4), (1, 2), rng=1, dtype=np.float64)
    for _, _, _, plane in stack.planes():
        plane.values[...] = rng.normal(size=plane.values.shape)
    dec = DecoderParams.create("extended", stack.feature_size, 5, rng=1, dtype=np.float64)
    rays = random_rays(rng, 6)
    bg = (0.2, 0.3, 0.4)
    out, _ = render_rays(stack, dec, rays, RenderSettings(UNIT, n_samples=5, background=bg))
    for r in range(6):
        ts, dl = sample_bins([rays.near[r]], [rays.far[r]], 5)
        sig, cols, ms = [], [], []
        for t in ts[0]:
            p = np.clip(rays.origins[r] + t * rays.directions[r], -1, 1)
            q = normalize_point(p, rays.times[r], UNIT)
            s, c, m = decode_direct(dec.arrays, "extended", field_direct(stack, q),
                                    rays.directions[r])
            sig.append(s)
            cols.append(c)
            ms.append(m)
        rc, rm, rd, ra, _ = composite_direct(sig, cols, ms, dl[0], ts[0], bg)
        np.testing.assert_allclose(out["rgb"][r], rc, atol=1e-12)
        assert out["mask"][r] == pytest.approx(rm, abs=1e-12)
        assert out["depth"][r] == pytest.approx(rd, abs=1e-10)


def test_missed_rays_render_background():
    stack, dec = homogeneous_field()
    o = np.array([[5.0, 5.0, 5.0]])
    d = np.array([[1.0, 0.0, 0.0]])
    near, far, hit = intersect_box(o, d, UNIT)
    out, tape = render_rays(stack, dec, RayBundle(o, d, near, far, hit, np.zeros(1)),
                            RenderSettings(UNIT, 8, background=(0.5, 0.6, 0.7)), keep_tape=True)
    np.testing.assert_array_equal(out["rgb"][0], [0.5, 0.6, 0.7])
    assert tape is None


@pytest.mark.parametrize("mode", ["stock", "extended"])
def test_backward_matches_finite_differences(mode):
    rng = np.random.default_rng(3)
    stack = PlaneStack.create(mode, 2, (4, 4, 4, 4), (1, 2), rng=2, dtype=np.float64)
    for _, _, _, plane in stack.planes():
        plane.values[...] = rng.uniform(0.3, 1.2, plane.values.shape)
    dec = DecoderParams.create(mode, stack.feature_size, 5, rng=2, dtype=np.float64)
    rays = random_rays(rng, 4)
    settings = RenderSettings(UNIT, n_samples=6, background=(0.1, 0.2, 0.3))
    wr, wm, wa = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=4)

    def objective():
        o, _ = render_rays(stack, dec, rays, settings)
        return np.sum(o["rgb"] * wr) + np.sum(o["mask"] * wm) + np.sum(o["acc"] * wa)

    _, tape = render_rays(stack, dec, rays, settings, keep_tape=True)
    grads = backward_rays(stack, dec, tape, wr, wm, g_acc=wa)
    params = {**stack.parameters(), **dec.parameters()}
    h = 1e-6
    checked = 0
    for name, arr in params.items():
        g = grads[name]
        idxs = list(zip(*np.nonzero(g)))[:3] or [tuple(0 for _ in arr.shape)]
        for idx in idxs:
            old = arr[idx]
            arr[idx] = old + h
            lp = objective()
            arr[idx] = old - h
            lm = objective()
            arr[idx] = old
            assert g[idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-4, abs=1e-8), (name, idx)
            checked += 1
    assert checked > 20


def test_gates_zero_the_gated_group():
    rng = np.random.default_rng(4)
    stack = PlaneStack.create("extended", 2, (4, 4, 4, 4), (1,), rng=0, dtype=np.float64)
    dec = DecoderParams.create("extended", stack.feature_size, 5, rng=0, dtype=np.float64)
    rays = random_rays(rng, 5)
    _, tape = render_rays(stack, dec, rays, RenderSettings(UNIT, 4), keep_tape=True)
    grads = backward_rays(stack, dec, tape, rng.normal(size=(5, 3)), rng.normal(size=5),
                          static_gate=np.zeros(5), dynamic_gate=np.ones(5))
    for name in stack.group_names("static"):
        assert not grads[name].any()
    assert any(grads[n].any() for n in stack.group_names("dynamic"))


class TestRenderImage:
    K = Intrinsics(10.0, 10.0, 5.5, 4.5, 12, 10)

    def _pose(self):
        eye = np.array([2.5, 1.0, 1.5])
        return CameraPose(look_at(eye, (0, 0, 0)), eye, self.K, 0.3)

    def test_shapes_and_threads_do_not_change_pixels(self):
        stack = PlaneStack.create("extended", 2, (4, 4, 4, 4), (1,), rng=0)
        dec = DecoderParams.create("extended", stack.feature_size, 8, rng=0)
        a = render_image(stack, dec, self._pose(), None, RenderSettings(UNIT, 8, chunk=17))
        b = render_image(stack, dec, self._pose(), None,
                         RenderSettings(UNIT, 8, chunk=17, threads=3))
        assert a.rgb.shape == (10, 12, 3) and a.mask.shape == (10, 12)
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)

    def test_homogeneous_image(self):
        stack, dec = homogeneous_field("stock", 1.3, (0.9, 0.1, 0.4))
        img = render_image(stack, dec, self._pose(), 0.0, RenderSettings(UNIT, 16))
        assert np.all(img.acc >= 0) and np.all(img.acc <= 1)
        assert img.acc.max() > 0.5
