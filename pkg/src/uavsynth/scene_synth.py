"""Procedural dynamic scenes rendered by an analytic ray caster.

A scene is a textured ground square at ``z = 0`` plus spheres and
axis-aligned boxes moving along piecewise-linear paths, lit by one
directional light and an ambient term (Lambert, no shadows). Rays that miss
everything see the background colour. Each frame comes with exact poses,
per-instance boxes taken from the visible silhouette, and a mask of pixels
covered by moving primitives.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .annotator import BBoxAnnotation
from .dataset_io import Frame, SceneDataset
from .scene_model import (CameraPose, Intrinsics, SceneBounds, axis_angle_matrix, look_at,
                          pixel_directions)

SHAPES = ("sphere", "box")


@dataclass
class Primitive:
    shape: str
    size: tuple[float, ...]          # sphere: (radius,); box: half extents (hx, hy, hz)
    albedo: tuple[float, float, float]
    waypoints: list[tuple[float, tuple[float, float, float]]]  # (tau, centre), tau ascending
    class_id: int = 0
    instance_id: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        need = 1 if self.shape == "sphere" else 3
        if len(self.size) != need or min(self.size) <= 0:
            raise ValueError(f"{self.shape} needs {need} positive size value(s), got {self.size}")
        if not self.waypoints:
            raise ValueError("primitive needs at least one waypoint")
        taus = [w[0] for w in self.waypoints]
        if taus != sorted(taus):
            raise ValueError("waypoint times must be ascending")

    @property
    def moving(self) -> bool:
        return len({tuple(p) for _, p in self.waypoints}) > 1

    def half_extents(self) -> np.ndarray:
        return np.full(3, self.size[0]) if self.shape == "sphere" else np.asarray(self.size, float)

    def position(self, tau: float) -> np.ndarray:
        taus = np.array([w[0] for w in self.waypoints], dtype=np.float64)
        pts = np.array([w[1] for w in self.waypoints], dtype=np.float64)
        return np.array([np.interp(tau, taus, pts[:, i]) for i in range(3)])


@dataclass
class GroundSpec:
    cells: int = 8
    colors: tuple = ((0.75, 0.7, 0.55), (0.35, 0.45, 0.3))
    noise_cells: int = 5
    noise_amplitude: float = 0.15
    seed: int = 0


@dataclass
class CameraPath:
    kind: str = "orbit"               # "orbit" or "sweep"
    frames: int = 60
    width: int = 64
    height: int = 64
    fov_deg: float = 50.0
    target: tuple = (0.0, 0.0, 0.0)
    radius: float = 4.5               # orbit
    altitude: float = 3.0             # orbit
    start_deg: float = 0.0            # orbit
    arc_deg: float = 360.0            # orbit
    start: tuple = (-3.0, -4.0, 3.0)  # sweep
    end: tuple = (3.0, -4.0, 3.0)     # sweep


@dataclass
class Lighting:
    direction: tuple = (0.4, 0.3, 1.0)  # towards the light
    ambient: float = 0.35


def _tuples(v):
    """JSON lists back to the tuples the dataclasses use."""
    if isinstance(v, dict):
        return {k: _tuples(x) for k, x in v.items()}
    if isinstance(v, list):
        return tuple(_tuples(x) for x in v)
    return v


@dataclass
class SceneSpec:
    name: str
    bounds_min: tuple
    bounds_max: tuple
    primitives: list[Primitive] = field(default_factory=list)
    camera: CameraPath = field(default_factory=CameraPath)
    ground: GroundSpec = field(default_factory=GroundSpec)
    lighting: Lighting = field(default_factory=Lighting)
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        self.bounds = SceneBounds(self.bounds_min, self.bounds_max)
        if self.camera.frames < 2:
            raise ValueError("a scene needs at least 2 frames")
        if self.camera.kind not in ("orbit", "sweep"):
            raise ValueError(f"unknown camera path {self.camera.kind!r}")
        for p in self.primitives:
            for _, c in p.waypoints:
                lo = np.asarray(c) - p.half_extents()
                hi = np.asarray(c) + p.half_extents()
                if np.any(lo < self.bounds.min) or np.any(hi > self.bounds.max):
                    raise ValueError(f"primitive {p.instance_id} leaves the scene bounds at {c}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("bounds", None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        prims = [Primitive(p["shape"], tuple(p["size"]), tuple(p["albedo"]),
                           [(float(t), tuple(c)) for t, c in p["waypoints"]],
                           int(p.get("class_id", 0)), int(p.get("instance_id", i)))
                 for i, p in enumerate(d.pop("primitives", []))]
        cam = CameraPath(**_tuples(d.pop("camera", {})))
        ground = GroundSpec(**_tuples(d.pop("ground", {})))
        light = Lighting(**_tuples(d.pop("lighting", {})))
        return cls(primitives=prims, camera=cam, ground=ground, lighting=light, **_tuples(d))

    @classmethod
    def from_json(cls, path) -> "SceneSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def toy_dyn_1() -> SceneSpec:
    """The standard toy scene: three moving spheres and one static box, 60-frame orbit.

    Lengths are metres at a small-UAV scale (40 m ground square, 32 m altitude).
    """
    s = 10.0

    def p(x, y, z):
        return (s * x, s * y, s * z)

    prims = [
        Primitive("sphere", (0.35 * s,), (0.9, 0.2, 0.15),
                  [(0.0, p(-1.2, -0.8, 0.35)), (0.5, p(0.2, -1.0, 0.35)), (1.0, p(1.1, 0.2, 0.35))],
                  class_id=0, instance_id=1),
        Primitive("sphere", (0.3 * s,), (0.15, 0.35, 0.9),
                  [(0.0, p(1.0, 1.1, 0.3)), (1.0, p(-0.9, 0.9, 0.3))], class_id=0, instance_id=2),
        Primitive("sphere", (0.28 * s,), (0.95, 0.85, 0.2),
                  [(0.0, p(0.0, 0.3, 0.28)), (0.4, p(-0.8, -0.3, 0.28)), (1.0, p(0.3, -0.2, 0.28))],
                  class_id=0, instance_id=3),
        Primitive("box", p(0.35, 0.3, 0.3), (0.85, 0.85, 0.85),
                  [(0.0, p(1.2, -1.3, 0.3))], class_id=1, instance_id=4),
    ]
    return SceneSpec("toy-dyn-1", p(-2.0, -2.0, -0.1), p(2.0, 2.0, 1.5), prims,
                     CameraPath(frames=60, width=64, height=64, fov_deg=55.0, radius=4.5 * s,
                                altitude=3.2 * s, start_deg=-90.0, arc_deg=360.0),
                     seed=1)


BUILTIN = {"toy-dyn-1": toy_dyn_1}


def builtin_spec(name_or_path) -> SceneSpec:
    if str(name_or_path) in BUILTIN:
        return BUILTIN[str(name_or_path)]()
    return SceneSpec.from_json(name_or_path)


# -- cameras ------------------------------------------------------------------

def camera_poses(spec: SceneSpec) -> list[CameraPose]:
    cam = spec.camera
    F = cam.frames
    k = Intrinsics.from_fov(cam.fov_deg, cam.width, cam.height)
    target = np.asarray(cam.target, dtype=np.float64)
    poses = []
    for i in range(F):
        s = i / (F - 1)
        if cam.kind == "orbit":
            # a closed orbit would repeat its first view; spread frames over [start, start + arc)
            a = np.radians(cam.start_deg + cam.arc_deg * i / (F if cam.arc_deg == 360 else F - 1))
            eye = target + np.array([cam.radius * np.cos(a), cam.radius * np.sin(a), 0.0])
            eye[2] = cam.altitude
        else:
            eye = (1 - s) * np.asarray(cam.start, float) + s * np.asarray(cam.end, float)
        poses.append(CameraPose(look_at(eye, target), eye, k, s))
    return poses


# -- reference ray caster -----------------------------------------------------

def ground_texture(spec: SceneSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Checker modulated by smooth seeded value noise; ``(N, 3)`` albedo."""
    g = spec.ground
    b = spec.bounds
    u = (x - b.min[0]) / b.size[0]
    v = (y - b.min[1]) / b.size[1]
    c0, c1 = (np.asarray(c, dtype=np.float64) for c in g.colors)
    parity = (np.floor(u * g.cells).astype(int) + np.floor(v * g.cells).astype(int)) % 2
    base = np.where(parity[:, None] == 0, c0, c1)
    rng = np.random.default_rng([spec.seed, g.seed])
    nodes = rng.uniform(-1.0, 1.0, size=(g.noise_cells + 1, g.noise_cells + 1, 3))
    fu = np.clip(u, 0, 1) * g.noise_cells
    fv = np.clip(v, 0, 1) * g.noise_cells
    i = np.minimum(fu.astype(int), g.noise_cells - 1)
    j = np.minimum(fv.astype(int), g.noise_cells - 1)
    wu = (fu - i)[:, None]
    wv = (fv - j)[:, None]
    noise = ((1 - wu) * (1 - wv) * nodes[i, j] + (1 - wu) * wv * nodes[i, j + 1]
             + wu * (1 - wv) * nodes[i + 1, j] + wu * wv * nodes[i + 1, j + 1])
    return np.clip(base + g.noise_amplitude * noise, 0.0, 1.0)


def _hit_sphere(o, d, c, r):
    oc = o - c
    bq = np.einsum("ij,ij->i", oc, d)
    cq = np.einsum("ij,ij->i", oc, oc) - r * r
    disc = bq * bq - cq
    t = np.full(len(d), np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -bq - sq
    t1 = -bq + sq
    tt = np.where(t0 > 1e-9, t0, t1)
    ok &= tt > 1e-9
    t[ok] = tt[ok]
    normals = (o + np.where(ok, t, 0.0)[:, None] * d - c) / r
    return t, normals


def _hit_box(o, d, c, h):
    lo, hi = c - h, c + h
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    tn = tmin.max(axis=1)
    tf = tmax.min(axis=1)
    ok = (tf >= tn) & (tn > 1e-9)
    t = np.where(ok, tn, np.inf)
    axis = tmin.argmax(axis=1)
    normals = np.zeros_like(d)
    rows = np.arange(len(d))
    normals[rows, axis] = -np.sign(d[rows, axis])
    return t, normals


@dataclass
class CastResult:
    image: np.ndarray   # (H, W, 3) float in [0, 1]
    ids: np.ndarray     # (H, W) primitive index hit first, -1 ground/background
    depth: np.ndarray   # (H, W) ray distance, inf where nothing was hit


def cast_frame(spec: SceneSpec, pose: CameraPose, tau: float | None = None) -> CastResult:
    """Render one frame by closed-form ray intersection."""
    tau = pose.timestamp if tau is None else tau
    k = pose.intrinsics
    rows, cols = np.meshgrid(np.arange(k.height), np.arange(k.width), indexing="ij")
    d = pixel_directions(pose, rows.ravel(), cols.ravel())
    o = np.broadcast_to(pose.center, d.shape)
    n = len(d)
    best = np.full(n, np.inf)
    ids = np.full(n, -1)
    normals = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    # ground square at z = 0 over the bounds footprint
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -o[:, 2] / d[:, 2]
        pg = o + tg[:, None] * d
    b = spec.bounds
    on = (tg > 1e-9) & (pg[:, 0] >= b.min[0]) & (pg[:, 0] <= b.max[0]) \
        & (pg[:, 1] >= b.min[1]) & (pg[:, 1] <= b.max[1])
    best[on] = tg[on]
    normals[on] = (0.0, 0.0, 1.0)
    albedo[on] = ground_texture(spec, pg[on, 0], pg[on, 1])
    ground_hit = on.copy()
    for idx, p in enumerate(spec.primitives):
        c = p.position(tau)
        if p.shape == "sphere":
            t, nrm = _hit_sphere(o, d, c, p.size[0])
        else:
            t, nrm = _hit_box(o, d, c, p.half_extents())
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = idx
        normals[closer] = nrm[closer]
        albedo[closer] = p.albedo
        ground_hit &= ~closer
    light = np.asarray(spec.lighting.direction, dtype=np.float64)
    light /= np.linalg.norm(light)
    amb = spec.lighting.ambient
    shade = amb + (1.0 - amb) * np.clip(normals @ light, 0.0, None)
    img = np.where(np.isfinite(best)[:, None], albedo * shade[:, None],
                   np.asarray(spec.background, dtype=np.float64))
    H, W = k.height, k.width
    return CastResult(np.clip(img, 0, 1).reshape(H, W, 3), ids.reshape(H, W), best.reshape(H, W))


def silhouette_boxes(spec: SceneSpec, ids: np.ndarray) -> list[BBoxAnnotation]:
    """Tight pixel boxes around each primitive's visible silhouette."""
    out = []
    for idx, p in enumerate(spec.primitives):
        rows, cols = np.nonzero(ids == idx)
        if len(rows) == 0:
            continue
        out.append(BBoxAnnotation(p.class_id, p.instance_id,
                                  (int(cols.min()), int(rows.min()), int(cols.max()) + 1,
                                   int(rows.max()) + 1), len(rows), p.moving))
    return out


def generate_scene(spec: SceneSpec, threads: int = 1) -> SceneDataset:
    """Frames, exact poses, silhouette boxes and moving-object masks."""
    poses = camera_poses(spec)
    moving = np.array([p.moving for p in spec.primitives] + [False], dtype=bool)

    def work(i):
        pose = poses[i]
        res = cast_frame(spec, pose)
        img = np.clip(np.round(res.image * 255.0), 0, 255).astype(np.uint8)
        dyn = moving[res.ids]  # index -1 maps to the trailing False
        return Frame(img, pose, silhouette_boxes(spec, res.ids), dyn,
                     f"images/{i:04d}.png", f"masks/{i:04d}.png")

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            frames = list(ex.map(work, range(len(poses))))
    else:
        frames = [work(i) for i in range(len(poses))]
    return SceneDataset(spec.name, spec.bounds, frames)


# -- pose noise ---------------------------------------------------------------

@dataclass(frozen=True)
class PoseNoiseSpec:
    rotation_sigma: float = 0.5       # degrees
    translation_sigma: float = 0.01   # fraction of the scene diagonal
    seed: int = 0

    def __post_init__(self):
        if self.rotation_sigma < 0 or self.translation_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")


def rotation_noise(rng: np.random.Generator, sigma_deg: float) -> tuple[np.ndarray, float]:
    """Axis uniform on the sphere and angle (degrees) from ``Normal(0, sigma_deg)``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis, float(rng.normal(0.0, sigma_deg)) if sigma_deg > 0 else 0.0


def perturb_poses(ds: SceneDataset, noise: PoseNoiseSpec) -> SceneDataset:
    """Copy of ``ds`` whose poses carry seeded rigid noise; images are shared untouched."""
    rng = np.random.default_rng(noise.seed)
    scale = noise.translation_sigma * ds.bounds.diagonal
    frames = []
    for fr in ds.frames:
        axis, angle = rotation_noise(rng, noise.rotation_sigma)
        offset = rng.normal(0.0, scale, size=3) if scale > 0 else np.zeros(3)
        pose = fr.pose
        if angle != 0.0:
            rot = axis_angle_matrix(axis, np.radians(angle)) @ pose.rotation
            u, _, vt = np.linalg.svd(rot)
            pose = pose.replace(rotation=u @ vt)
        if scale > 0:
            pose = pose.replace(translation=pose.translation + offset)
        frames.append(Frame(fr.image, pose, fr.boxes, fr.dynamic_mask, fr.image_path,
                            fr.mask_path))
    return SceneDataset(ds.name, ds.bounds, frames)
