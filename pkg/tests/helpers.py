"""Shared fixtures-as-functions for the test modules."""

import numpy as np

from uavsynth.decoder import DecoderParams
from uavsynth.plane_field import PlaneStack
from uavsynth.scene_model import RayBundle, SceneBounds, intersect_box

UNIT = SceneBounds((-1, -1, -1), (1, 1, 1))


def logit(p):
    return float(np.log(p / (1 - p)))


def inv_softplus(y):
    return float(np.log(np.expm1(y)))


def homogeneous_field(mode="stock", sigma=0.7, color=(0.2, 0.5, 0.9), D=2, mask=0.0, seed=0):
    """Field whose density and colour are the same constant everywhere."""
    stack = PlaneStack.create(mode, D, (4, 4, 4, 4), (1,), rng=seed, dtype=np.float64)
    dec = DecoderParams.create(mode, stack.feature_size, 8, rng=seed, dtype=np.float64)
    a = dec.arrays
    a["density.1.w"][:] = 0
    a["density.1.b"][:] = inv_softplus(sigma)
    a["color.1.w"][:] = 0
    a["color.1.b"][:] = [logit(c) for c in color]
    if mode == "extended":
        a["mask.0.w"][:] = 0
        a["mask.0.b"][:] = logit(mask) if 0 < mask < 1 else -50.0
    return stack, dec


def random_rays(rng, R, bounds=UNIT, radius=3.0):
    """Rays from a sphere around the box aimed at random interior points."""
    o = rng.normal(size=(R, 3))
    o *= radius / np.linalg.norm(o, axis=1, keepdims=True)
    target = rng.uniform(bounds.min * 0.9, bounds.max * 0.9, (R, 3))
    d = target - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    near, far, hit = intersect_box(o, d, bounds)
    return RayBundle(o, d, near, far, hit, rng.uniform(size=R))


# acceptance criterion -> (passed, detail); printed by the terminal summary hook
ACCEPTANCE: dict = {}


class criterion:
    """Record one acceptance criterion as passed unless the block raises."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        detail = self.detail or (f"{exc_type.__name__}: {exc}" if exc_type else "")
        ACCEPTANCE[self.number] = (exc_type is None, self.title, detail)
        return False
