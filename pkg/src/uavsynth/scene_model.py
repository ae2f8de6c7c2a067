"""Camera poses, rays, trajectories and the scene bounding box.

Conventions
-----------
* Camera frame is right-handed: +x right, +y up, the camera looks along -z.
* Image rows grow downward, columns grow to the right.
* Intrinsics use the integer-centre convention: the centre of pixel
  ``(row, col)`` sits at image coordinate ``(x=col, y=row)``. A pixel centred
  exactly on the principal point therefore casts the optical axis.
* :meth:`CameraPose.project` returns *raster* coordinates in which pixel
  ``(row, col)`` covers ``[row, row+1) x [col, col+1)``; its centre is
  ``(row + 0.5, col + 0.5)``.
* Timestamps are normalised to ``[0, 1]`` over the ingested sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-6


def _readonly(a, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int) -> "Intrinsics":
        """Square-pixel camera with horizontal field of view ``fov_deg``."""
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Rigid camera-to-world transform with intrinsics and a scene time."""

    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: Intrinsics
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", _readonly(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _readonly(self.translation, (3,)))
        object.__setattr__(self, "timestamp", float(self.timestamp))
        check_rotation(self.rotation, ORTHO_TOL)
        if not 0.0 <= self.timestamp <= 1.0:
            raise ValueError(f"timestamp {self.timestamp} outside [0, 1]")

    @classmethod
    def from_matrix(cls, c2w, intrinsics: Intrinsics, timestamp: float = 0.0) -> "CameraPose":
        m = np.asarray(c2w, dtype=np.float64).reshape(-1)
        if m.size == 16:
            m = m.reshape(4, 4)
        elif m.size == 12:
            m = m.reshape(3, 4)
        else:
            raise ValueError(f"camera-to-world matrix needs 12 or 16 entries, got {m.size}")
        return cls(m[:3, :3], m[:3, 3], intrinsics, timestamp)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        """Optical axis in world coordinates."""
        return -self.rotation[:, 2]

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def replace(self, **changes) -> "CameraPose":
        kw = dict(rotation=self.rotation, translation=self.translation,
                  intrinsics=self.intrinsics, timestamp=self.timestamp)
        kw.update(changes)
        return CameraPose(**kw)

    def project(self, points) -> np.ndarray:
        """World points ``(..., 3)`` to raster ``(row, col)`` coordinates ``(..., 2)``."""
        p = np.asarray(points, dtype=np.float64)
        cam = (p - self.translation) @ self.rotation
        depth = -cam[..., 2]
        k = self.intrinsics
        col = k.cx + k.fx * cam[..., 0] / depth
        row = k.cy - k.fy * cam[..., 1] / depth
        return np.stack([row + 0.5, col + 0.5], axis=-1)

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation)
                and self.intrinsics == other.intrinsics
                and self.timestamp == other.timestamp)

    __hash__ = None


def check_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> None:
    """Raise ``ValueError`` unless ``r`` is a proper rotation to within ``tol``."""
    r = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("rotation has non-finite entries")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"rotation not orthonormal (max |R^T R - I| = {err:.3g})")
    det = np.linalg.det(r)
    if abs(det - 1.0) > tol:
        raise ValueError(f"rotation determinant {det:.9f} != 1")


@dataclass(frozen=True, eq=False)
class SceneBounds:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", _readonly(self.min, (3,)))
        object.__setattr__(self, "max", _readonly(self.max, (3,)))
        if not np.all(self.min < self.max):
            raise ValueError(f"bounds min {self.min} not strictly below max {self.max}")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.all((p >= self.min) & (p <= self.max), axis=-1)

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    def __eq__(self, other):
        if not isinstance(other, SceneBounds):
            return NotImplemented
        return np.array_equal(self.min, other.min) and np.array_equal(self.max, other.max)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Ray:
    """A single ray. ``empty`` rays miss the scene box and render as background."""

    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple[int, int] = (0, 0)
    timestamp: float = 0.0
    empty: bool = False

    def __post_init__(self):
        object.__setattr__(self, "origin", _readonly(self.origin, (3,)))
        object.__setattr__(self, "direction", _readonly(self.direction, (3,)))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.empty and not 0.0 <= self.near < self.far:
            raise ValueError(f"need 0 <= near < far, got near={self.near}, far={self.far}")

    def at(self, t):
        return self.origin + np.multiply.outer(np.asarray(t, dtype=np.float64), self.direction)


def intersect_box(origins: np.ndarray, directions: np.ndarray, bounds: SceneBounds):
    """Slab test. Returns ``(near, far, hit)`` with ``near`` clamped at 0."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (bounds.min - o) * inv
        t1 = (bounds.max - o) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # a zero direction component inside the slab gives (-inf, inf); outside it gives nan
    inside = (o >= bounds.min) & (o <= bounds.max)
    lo = np.where(np.isnan(lo), np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(np.isnan(hi), np.where(inside, np.inf, -np.inf), hi)
    near = np.maximum(lo.max(axis=-1), 0.0)
    far = hi.min(axis=-1)
    hit = far > near
    return near, far, hit


def pixel_directions(pose: CameraPose, rows, cols) -> np.ndarray:
    """Unit world-space directions through the centres of the given pixels."""
    k = pose.intrinsics
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    cam = np.stack([(cols - k.cx) / k.fx, -(rows - k.cy) / k.fy, -np.ones_like(rows)], axis=-1)
    d = cam @ pose.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_for_pixel(pose: CameraPose, row: int, col: int, bounds: SceneBounds) -> Ray:
    k = pose.intrinsics
    if not (0 <= row < k.height and 0 <= col < k.width):
        raise IndexError(f"pixel ({row}, {col}) outside {k.height}x{k.width} image")
    d = pixel_directions(pose, row, col)
    near, far, hit = intersect_box(pose.center, d, bounds)
    if not hit:
        return Ray(pose.center, d, 0.0, 0.0, (row, col), pose.timestamp, empty=True)
    return Ray(pose.center, d, float(near), float(far), (row, col), pose.timestamp)


@dataclass
class RayBundle:
    """Structure-of-arrays rays, the batched form used by the renderer and trainer."""

    origins: np.ndarray     # (R, 3)
    directions: np.ndarray  # (R, 3)
    near: np.ndarray        # (R,)
    far: np.ndarray         # (R,)
    hit: np.ndarray         # (R,) bool
    times: np.ndarray       # (R,)

    def __len__(self):
        return len(self.near)

    def __getitem__(self, idx) -> "RayBundle":
        return RayBundle(self.origins[idx], self.directions[idx], self.near[idx],
                         self.far[idx], self.hit[idx], self.times[idx])

    @staticmethod
    def concatenate(bundles: Sequence["RayBundle"]) -> "RayBundle":
        return RayBundle(*(np.concatenate([getattr(b, n) for b in bundles])
                           for n in ("origins", "directions", "near", "far", "hit", "times")))


def rays_for_pose(pose: CameraPose, bounds: SceneBounds, timestamp: float | None = None) -> RayBundle:
    """All pixel rays of ``pose`` in row-major order."""
    k = pose.intrinsics
    rows, cols = np.meshgrid(np.arange(k.height), np.arange(k.width), indexing="ij")
    d = pixel_directions(pose, rows.ravel(), cols.ravel())
    o = np.broadcast_to(pose.center, d.shape).copy()
    near, far, hit = intersect_box(o, d, bounds)
    t = pose.timestamp if timestamp is None else timestamp
    return RayBundle(o, d, np.where(hit, near, 0.0), np.where(hit, far, 0.0), hit,
                     np.full(len(d), float(t)))


# -- rotations ---------------------------------------------------------------

def quat_from_matrix(r: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k])
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    kx = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def slerp_quat(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    """Shortest-arc slerp. At exactly 90 degrees of quaternion separation
    (a 180 degree relative rotation) ``q1`` keeps its sign, i.e. the arc stays
    on the hemisphere of ``q0``."""
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    if d > 1.0 - 1e-12:
        q = q0 + s * (q1 - q0)
        return q / np.linalg.norm(q)
    theta = np.arccos(min(d, 1.0))
    st = np.sin(theta)
    q = (np.sin((1 - s) * theta) / st) * q0 + (np.sin(s * theta) / st) * q1
    return q / np.linalg.norm(q)


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def interpolate_pose(p0: CameraPose, p1: CameraPose, s: float) -> CameraPose:
    """Slerp the rotations, lerp translation and time; intrinsics from ``p0``."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"interpolation parameter {s} outside [0, 1]")
    if s == 0.0:
        return p0.replace(intrinsics=p0.intrinsics)
    if s == 1.0:
        return p1.replace(intrinsics=p0.intrinsics)
    q = slerp_quat(quat_from_matrix(p0.rotation), quat_from_matrix(p1.rotation), s)
    rot = _orthonormalize(matrix_from_quat(q))
    trans = (1 - s) * p0.translation + s * p1.translation
    ts = (1 - s) * p0.timestamp + s * p1.timestamp
    return CameraPose(rot, trans, p0.intrinsics, min(max(ts, 0.0), 1.0))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation looking from ``eye`` towards ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:  # looking straight along up
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, fwd)
    return np.stack([right, cam_up, -fwd], axis=1)


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[CameraPose, ...] = field(default_factory=tuple)

    def __post_init__(self):
        poses = tuple(self.poses)
        object.__setattr__(self, "poses", poses)
        if len(poses) < 2:
            raise ValueError("a trajectory needs at least 2 poses")
        ts = np.array([p.timestamp for p in poses])
        if np.any(np.diff(ts) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @property
    def frame_count(self) -> int:
        return len(self.poses)

    @property
    def frame_interval(self) -> float:
        """Mean time between frames; ``1 / (F - 1)`` for uniform normalised times."""
        f = self.frame_count
        span = self.poses[-1].timestamp - self.poses[0].timestamp
        if self.poses[0].timestamp == 0.0 and self.poses[-1].timestamp == 1.0:
            return 1.0 / (f - 1)
        return span / (f - 1)

    def pose_at(self, s: float) -> CameraPose:
        """Pose at fractional position ``s`` in ``[0, 1]`` along the frame sequence."""
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"trajectory parameter {s} outside [0, 1]")
        x = s * (self.frame_count - 1)
        i = min(int(np.floor(x)), self.frame_count - 2)
        return interpolate_pose(self.poses[i], self.poses[i + 1], min(x - i, 1.0))
