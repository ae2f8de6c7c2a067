"""Novel camera poses for synthesis.

Static scenes get randomised orbit poses (altitude, radius, view angle and
azimuth drawn uniformly). Dynamic scenes get ``N`` interpolated locations on
the recorded trajectory, each rendered at ``t`` and ``t -/+ dt``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .scene_model import (CameraPose, Intrinsics, Trajectory, interpolate_pose, look_at)

TAGS = ("static_novel", "dyn_t", "dyn_t_minus", "dyn_t_plus")
CANDIDATES_PER_INTERVAL = 4


@dataclass(frozen=True)
class OrbitSpec:
    center: tuple[float, float, float]
    altitude: tuple[float, float]
    radius: tuple[float, float]
    view_angle: tuple[float, float] | None  # degrees below horizontal; None aims at the centre
    count: int
    seed: int = 0

    def __post_init__(self):
        for name in ("altitude", "radius") + (("view_angle",) if self.view_angle else ()):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range ({lo}, {hi}) has lo > hi")
        if self.radius[0] < 0:
            raise ValueError("orbit radius must be >= 0")
        if self.count < 1:
            raise ValueError("count must be >= 1")


@dataclass(frozen=True, eq=False)
class NovelViewRequest:
    pose: CameraPose
    timestamp: float
    tag: str

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag {self.tag!r}")
        if not 0.0 <= self.timestamp <= 1.0:
            raise ValueError(f"timestamp {self.timestamp} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"transform": self.pose.matrix().ravel().tolist(),
                "intrinsics": self.pose.intrinsics.to_dict(), "time": self.timestamp,
                "tag": self.tag}

    @classmethod
    def from_dict(cls, d: dict) -> "NovelViewRequest":
        k = d["intrinsics"]
        intr = Intrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
                          int(k["width"]), int(k["height"]))
        t = float(d["time"])
        return cls(CameraPose.from_matrix(d["transform"], intr, t), t, d["tag"])


def _orbit_rotation(eye: np.ndarray, center: np.ndarray, angle_deg: float | None) -> np.ndarray:
    if angle_deg is None:
        return look_at(eye, center)
    # horizontal heading towards the orbit axis, pitched down by the view angle
    h = center[:2] - eye[:2]
    n = np.linalg.norm(h)
    heading = h / n if n > 0 else np.array([1.0, 0.0])
    a = np.radians(angle_deg)
    fwd = np.array([heading[0] * np.cos(a), heading[1] * np.cos(a), -np.sin(a)])
    return look_at(eye, eye + fwd)


def sample_static_poses(spec: OrbitSpec, intrinsics: Intrinsics,
                        waypoint_density: int = 0) -> list[CameraPose]:
    """``spec.count`` orbit poses; ``waypoint_density`` interpolated poses between neighbours.

    With ``view_angle=None`` every camera looks exactly at ``spec.center``.
    """
    rng = np.random.default_rng(spec.seed)
    c = np.asarray(spec.center, dtype=np.float64)
    poses = []
    for _ in range(spec.count):
        az = np.radians(rng.uniform(0.0, 360.0))
        alt = rng.uniform(*spec.altitude)
        rad = rng.uniform(*spec.radius)
        ang = rng.uniform(*spec.view_angle) if spec.view_angle is not None else None
        eye = np.array([c[0] + rad * np.cos(az), c[1] + rad * np.sin(az), c[2] + alt])
        poses.append(CameraPose(_orbit_rotation(eye, c, ang), eye, intrinsics, 0.0))
    if waypoint_density < 1 or len(poses) < 2:
        return poses
    out = [poses[0]]
    for p0, p1 in zip(poses[:-1], poses[1:]):
        for j in range(1, waypoint_density + 1):
            out.append(interpolate_pose(p0, p1, j / (waypoint_density + 1)))
        out.append(p1)
    return out


def sample_dynamic_requests(traj: Trajectory, n: int, seed: int = 0) -> list[NovelViewRequest]:
    """``3 n`` requests: ``n`` trajectory locations at ``t``, ``t - dt`` and ``t + dt``.

    Locations are drawn without replacement from ``CANDIDATES_PER_INTERVAL``
    evenly spaced points per frame interval; when ``n`` exceeds that pool they
    are drawn with replacement and a warning is emitted.
    """
    if n < 1:
        raise ValueError("N must be >= 1")
    F = traj.frame_count
    m = (F - 1) * CANDIDATES_PER_INTERVAL + 1
    rng = np.random.default_rng(seed)
    if n <= m:
        picks = rng.choice(m, size=n, replace=False)
    else:
        warnings.warn(f"{n} locations requested but only {m} distinct ones exist; "
                      "sampling with replacement", stacklevel=2)
        picks = rng.choice(m, size=n, replace=True)
    dt = traj.frame_interval
    out = []
    for pick in picks:
        pose = traj.pose_at(pick / (m - 1))
        t = pose.timestamp
        for tag, tt in (("dyn_t", t), ("dyn_t_minus", t - dt), ("dyn_t_plus", t + dt)):
            tt = min(max(tt, 0.0), 1.0)
            out.append(NovelViewRequest(pose, tt, tag))
    return out


def static_requests(poses) -> list[NovelViewRequest]:
    return [NovelViewRequest(p, p.timestamp, "static_novel") for p in poses]


def save_requests(requests, path) -> None:
    with open(path, "w") as fh:
        json.dump({"requests": [r.to_dict() for r in requests]}, fh, indent=1)


def load_requests(path) -> list[NovelViewRequest]:
    with open(path) as fh:
        doc = json.load(fh)
    return [NovelViewRequest.from_dict(d) for d in doc["requests"]]
