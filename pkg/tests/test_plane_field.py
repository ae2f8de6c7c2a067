import numpy as np
import pytest

from oracles import bilinear, cosine_direct, field_direct
from uavsynth.plane_field import (ModeError, PlaneGrid, PlaneStack, PlaneVectorGrads,
                                  cosine_separation_loss, field_backward, interp_plane,
                                  mode_groups, normalize_point, sample_extended, sample_field,
                                  sample_stock, scatter_plane_grads)
from uavsynth.scene_model import SceneBounds


def small_stack(mode, seed=0, D=3, res=(4, 5, 3, 6), mults=(1, 2), dtype=np.float64):
    st = PlaneStack.create(mode, D, res, mults, rng=seed, dtype=dtype)
    # randomise away from the init band so mask channels and signs are exercised
    rng = np.random.default_rng(seed + 100)
    for _, _, _, plane in st.planes():
        plane.values[...] = rng.normal(size=plane.values.shape)
    return st


class TestLayout:
    def test_groups(self):
        assert mode_groups("stock") == {"main": ("xy", "xz", "yz", "xt", "yt", "zt")}
        assert mode_groups("spatial_only") == {"main": ("xy", "xz", "yz")}
        assert set(mode_groups("extended")) == {"static", "dynamic"}
        with pytest.raises(ModeError):
            mode_groups("nope")

    def test_plane_shapes_follow_axes_and_multipliers(self):
        st = PlaneStack.create("extended", 4, (8, 6, 5, 7), (1, 2), rng=0)
        assert st.scales[1]["static"]["xz"].values.shape == (16, 10, 4)
        # time is not multiplied; dynamic temporal planes carry the mask channel
        assert st.scales[1]["dynamic"]["yt"].values.shape == (12, 7, 5)
        assert st.scales[0]["dynamic"]["xy"].values.shape == (8, 6, 4)
        assert st.feature_size == 8

    def test_init_range_and_mask_channel_zero(self):
        st = PlaneStack.create("extended", 4, (8, 6, 5, 7), (1,), rng=0)
        for _, _, group, plane in st.planes():
            v = plane.values
            assert np.all((v[..., :4] >= 0.9) & (v[..., :4] <= 1.1))
            if plane.is_temporal and group == "dynamic":
                assert np.all(v[..., 4] == 0)

    def test_create_is_seeded(self):
        a = PlaneStack.create("stock", 2, (4, 4, 4, 4), (1,), rng=7)
        b = PlaneStack.create("stock", 2, (4, 4, 4, 4), (1,), rng=7)
        for (na, *_, pa), (nb, *_, pb) in zip(a.planes(), b.planes()):
            assert na == nb and np.array_equal(pa.values, pb.values)

    def test_rejects_bad_grid(self):
        with pytest.raises(ValueError):
            PlaneGrid("xy", np.zeros((1, 4, 2)))
        with pytest.raises(ValueError):
            PlaneGrid("tx", np.zeros((2, 2, 2)))


class TestInterpolation:
    def test_nodes_are_exact(self):
        vals = np.random.default_rng(0).normal(size=(5, 4, 2))
        plane = PlaneGrid("xy", vals)
        for i in range(5):
            for j in range(4):
                np.testing.assert_allclose(interp_plane(plane, (i / 4, j / 3, 0, 0)), vals[i, j],
                                           atol=1e-15)

    def test_clamps_outside_unit_square(self):
        vals = np.random.default_rng(1).normal(size=(3, 3, 1))
        plane = PlaneGrid("xt", vals)
        np.testing.assert_allclose(interp_plane(plane, (-0.5, 0, 0, 2.0)), vals[0, 2])

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        vals = rng.normal(size=(6, 7, 3))
        plane = PlaneGrid("yz", vals)
        q = rng.uniform(-0.2, 1.2, (200, 4))
        got = interp_plane(plane, q)
        for i in range(200):
            np.testing.assert_allclose(got[i], bilinear(vals, q[i, 1], q[i, 2]), atol=1e-13)


class TestSampling:
    @pytest.mark.parametrize("mode", ["stock", "spatial_only", "extended"])
    def test_matches_direct_evaluation(self, mode):
        rng = np.random.default_rng(3)
        st = small_stack(mode)
        q = rng.uniform(size=(50, 4))
        s = sample_field(st, q)
        for i in range(50):
            ref = field_direct(st, q[i])
            for key, val in ref.items():
                np.testing.assert_allclose(getattr(s, key)[i], val, rtol=1e-12, atol=1e-12)

    def test_spatial_only_ignores_time(self):
        st = small_stack("spatial_only")
        a = sample_stock(st, [0.3, 0.4, 0.5, 0.0]).f
        b = sample_stock(st, [0.3, 0.4, 0.5, 1.0]).f
        assert np.array_equal(a, b)

    def test_mode_mismatch(self):
        with pytest.raises(ModeError):
            sample_extended(small_stack("stock"), [[0.5] * 4])
        with pytest.raises(ModeError):
            sample_stock(small_stack("extended"), [[0.5] * 4])

    def test_fresh_mask_logits_are_zero(self):
        st = PlaneStack.create("extended", 2, (4, 4, 4, 4), (1, 2), rng=0)
        s = sample_extended(st, np.random.default_rng(0).uniform(size=(10, 4)))
        assert np.all(s.mask_logits == 0)


class TestCosine:
    def test_matches_direct(self):
        rng = np.random.default_rng(4)
        st = small_stack("extended")
        q = rng.uniform(size=(30, 4))
        loss = cosine_separation_loss(sample_extended(st, q))
        assert loss == pytest.approx(cosine_direct(st, q), rel=1e-12)

    def test_parallel_vectors_give_one_per_pair(self):
        st = PlaneStack.create("extended", 3, (4, 4, 4, 4), (1,), rng=0, init_range=(1, 1))
        loss = cosine_separation_loss(sample_extended(st, [[0.5] * 4]))
        assert loss == pytest.approx(3.0)

    def test_zero_norm_contributes_nothing(self):
        st = small_stack("extended", mults=(1,))
        st.scales[0]["static"]["xy"].values[...] = 0
        q = np.random.default_rng(5).uniform(size=(8, 4))
        loss, grads = cosine_separation_loss(sample_extended(st, q), return_grad=True)
        assert loss == pytest.approx(cosine_direct(st, q), rel=1e-12)
        assert all(np.all(np.isfinite(g)) for g in grads.values())

    def test_requires_extended(self):
        with pytest.raises(ModeError):
            cosine_separation_loss(sample_stock(small_stack("stock"), [[0.5] * 4]))

    def test_gradient_matches_finite_differences(self):
        st = small_stack("extended", mults=(1,))
        q = np.random.default_rng(6).uniform(size=(5, 4))
        s = sample_extended(st, q)
        _, g = cosine_separation_loss(s, return_grad=True)
        grads = scatter_plane_grads(st, q, field_backward(st, s, per_plane_grads=g))
        name = "planes/0/static/xz"
        plane = st.scales[0]["static"]["xz"].values
        h = 1e-6
        for idx in [(0, 0, 0), (1, 2, 1), (3, 2, 2), (2, 1, 0)]:
            old = plane[idx]
            plane[idx] = old + h
            lp = cosine_separation_loss(sample_extended(st, q))
            plane[idx] = old - h
            lm = cosine_separation_loss(sample_extended(st, q))
            plane[idx] = old
            assert grads[name][idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-9)


@pytest.mark.parametrize("mode", ["stock", "extended"])
def test_field_backward_matches_finite_differences(mode):
    rng = np.random.default_rng(7)
    st = small_stack(mode, mults=(1, 2))
    q = rng.uniform(size=(6, 4))
    s = sample_field(st, q)
    if mode == "extended":
        W = {k: rng.normal(size=getattr(s, k).shape) for k in ("f_s", "f_d", "mask_logits")}

        def objective():
            t = sample_field(st, q)
            return sum(np.sum(getattr(t, k) * w) for k, w in W.items())

        vg = field_backward(st, s, grad_f_s=W["f_s"], grad_f_d=W["f_d"],
                            grad_mask_logits=W["mask_logits"])
    else:
        W = rng.normal(size=s.f.shape)

        def objective():
            return np.sum(sample_field(st, q).f * W)

        vg = field_backward(st, s, grad_f=W)
    grads = scatter_plane_grads(st, q, vg)
    h = 1e-6
    for name, _, _, plane in st.planes():
        vals = plane.values
        for _ in range(3):
            idx = tuple(int(rng.integers(0, n)) for n in vals.shape)
            old = vals[idx]
            vals[idx] = old + h
            lp = objective()
            vals[idx] = old - h
            lm = objective()
            vals[idx] = old
            fd = (lp - lm) / (2 * h)
            got = grads.get(name, np.zeros_like(vals))[idx]
            assert got == pytest.approx(fd, rel=1e-5, abs=1e-8), (name, idx)


def test_mask_gradient_is_split_across_scales():
    st = small_stack("extended", mults=(1, 2))
    q = np.array([[0.0, 0.0, 0.0, 0.0]])
    vg = PlaneVectorGrads(mask={0: np.array([[2.0, 0, 0]]), 1: np.array([[2.0, 0, 0]])})
    grads = scatter_plane_grads(st, q, vg)
    assert grads["planes/0/dynamic/xt"][0, 0, st.D] == 2.0
    vg2 = field_backward(st, sample_extended(st, q), grad_mask_logits=np.array([[2.0, 0, 0]]))
    assert vg2.mask[0][0, 0] == 1.0 and vg2.mask[1][0, 0] == 1.0


class TestNormalize:
    B = SceneBounds((-2, 0, 0), (2, 4, 1))

    def test_maps_box_to_unit_cube(self):
        q = normalize_point([[-2, 0, 0], [0, 2, 0.5], [2, 4, 1]], [0.0, 0.5, 1.0], self.B)
        np.testing.assert_allclose(q, [[0, 0, 0, 0], [0.5, 0.5, 0.5, 0.5], [1, 1, 1, 1]])

    def test_rejects_out_of_bounds(self):
        with pytest.raises(ValueError):
            normalize_point([3, 0, 0], 0.0, self.B)
        with pytest.raises(ValueError):
            normalize_point([0, 0, 0], 1.5, self.B)
