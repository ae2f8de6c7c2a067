"""Scene datasets on disk, mask-image datasets, and detector-ready exports.

Scene directory layout::

    scene.json
    images/000.png ...
    masks/000.png ...        (optional dynamic-region masks)

``scene.json``::

    {"name": str,
     "bounds": {"min": [x, y, z], "max": [x, y, z]},
     "frames": [{"image": "images/000.png",
                 "transform": [16 numbers, row-major camera-to-world],
                 "intrinsics": {"fx", "fy", "cx", "cy", "width", "height"},
                 "time": float in [0, 1],
                 "boxes": [{"class", "instance", "x_min", "y_min", "x_max", "y_max",
                            "dynamic"?}]?,
                 "mask": "masks/000.png"?}]}

Detection export layout::

    images/<name>.png
    labels/<name>.txt     one "class cx cy w h" line per box, normalised
    manifest.json         {"images/<name>.png": "real" | "synthetic"}
    classes.txt           one class id per line
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .annotator import BBoxAnnotation, InstancePalette
from .scene_model import CameraPose, Intrinsics, SceneBounds, Trajectory, check_rotation

log = logging.getLogger(__name__)

MANIFEST = "scene.json"
ROTATION_TOL = 1e-6


class SceneFormatError(ValueError):
    pass


@dataclass(eq=False)
class Frame:
    image: np.ndarray            # (H, W, 3) uint8
    pose: CameraPose
    boxes: list[BBoxAnnotation] | None = None
    dynamic_mask: np.ndarray | None = None  # (H, W) bool
    image_path: str = ""
    mask_path: str | None = None

    @property
    def time(self) -> float:
        return self.pose.timestamp


@dataclass(eq=False)
class SceneDataset:
    name: str
    bounds: SceneBounds
    frames: list[Frame] = field(default_factory=list)

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def image_size(self) -> tuple[int, int]:
        """``(height, width)`` of every frame."""
        k = self.frames[0].pose.intrinsics
        return k.height, k.width

    def trajectory(self) -> Trajectory:
        return Trajectory(tuple(f.pose for f in self.frames))

    def subset(self, indices) -> "SceneDataset":
        return SceneDataset(self.name, self.bounds, [self.frames[i] for i in indices])


def split_frames(ds: SceneDataset, holdout_every: int = 2) -> tuple[list[int], list[int]]:
    """Training/held-out frame indices: every ``holdout_every``-th frame starting at 1 is held out."""
    idx = list(range(ds.frame_count))
    held = [i for i in idx if i % holdout_every == 1]
    return [i for i in idx if i % holdout_every != 1], held


def dynamic_flags(frame: Frame) -> np.ndarray:
    """Per-pixel 1 inside any dynamic ground-truth box (filled rectangle), else 0."""
    h, w = frame.image.shape[:2]
    flags = np.zeros((h, w), dtype=np.uint8)
    for b in frame.boxes or []:
        if b.dynamic:
            x0, y0, x1, y1 = b.box
            flags[max(y0, 0):min(y1, h), max(x0, 0):min(x1, w)] = 1
    return flags


# -- images -------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def write_png(path, array: np.ndarray) -> None:
    # 2-D uint16 arrays map to 16-bit greyscale
    Image.fromarray(np.asarray(array)).save(path)


def to_u8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def to_u16(img, scale: float = 1.0) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) / scale * 65535.0), 0,
                   65535).astype(np.uint16)


def _atomic_dir(out: Path):
    """Create a sibling temp dir; caller renames it over ``out`` when complete."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))


def _commit_dir(tmp: Path, out: Path) -> None:
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


@contextmanager
def staged_dir(out):
    """Yield a scratch directory that replaces ``out`` only if the block succeeds."""
    tmp = _atomic_dir(out)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit_dir(tmp, out)


# -- scene manifest -----------------------------------------------------------

def _box_to_json(b: BBoxAnnotation) -> dict:
    d = {"class": b.class_id, "instance": b.instance_id, "x_min": b.box[0], "y_min": b.box[1],
         "x_max": b.box[2], "y_max": b.box[3]}
    if not b.dynamic:
        d["dynamic"] = False
    return d


def save_scene(ds: SceneDataset, path) -> Path:
    """Write ``ds`` as a scene directory (atomically replaces ``path``)."""
    out = Path(path)
    tmp = _atomic_dir(out)
    try:
        frames = []
        for i, fr in enumerate(ds.frames):
            rel = fr.image_path or f"images/{i:04d}.png"
            (tmp / rel).parent.mkdir(parents=True, exist_ok=True)
            write_png(tmp / rel, fr.image)
            entry = {"image": rel, "transform": fr.pose.matrix().ravel().tolist(),
                     "intrinsics": fr.pose.intrinsics.to_dict(), "time": fr.time}
            if fr.boxes is not None:
                entry["boxes"] = [_box_to_json(b) for b in fr.boxes]
            if fr.dynamic_mask is not None:
                mrel = fr.mask_path or f"masks/{i:04d}.png"
                (tmp / mrel).parent.mkdir(parents=True, exist_ok=True)
                write_png(tmp / mrel, fr.dynamic_mask.astype(np.uint8) * 255)
                entry["mask"] = mrel
            frames.append(entry)
        doc = {"name": ds.name, "bounds": ds.bounds.to_dict(), "frames": frames}
        (tmp / MANIFEST).write_text(json.dumps(doc, indent=1))
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit_dir(tmp, out)
    return out


def load_scene(path) -> SceneDataset:
    """Load and validate a scene directory; errors name the offending frame and field."""
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise SceneFormatError(f"{mpath}: manifest not found")
    try:
        doc = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"{mpath}: invalid JSON ({e})") from None
    try:
        bounds = SceneBounds(doc["bounds"]["min"], doc["bounds"]["max"])
    except (KeyError, TypeError, ValueError) as e:
        raise SceneFormatError(f"{mpath}: bad 'bounds' ({e})") from None
    frames = []
    shape = None
    prev_t = -np.inf
    for i, fd in enumerate(doc.get("frames", [])):
        where = f"{mpath}: frame {i} ({fd.get('image', '?')})"
        try:
            rel = fd["image"]
            m = np.asarray(fd["transform"], dtype=np.float64)
            intr = fd["intrinsics"]
            t = float(fd["time"])
        except (KeyError, TypeError, ValueError) as e:
            raise SceneFormatError(f"{where}: missing or malformed field {e}") from None
        ipath = root / rel
        if not ipath.is_file():
            raise SceneFormatError(f"{where}: image file {ipath} does not exist")
        if m.size != 16:
            raise SceneFormatError(f"{where}: 'transform' needs 16 numbers, got {m.size}")
        m = m.reshape(4, 4)
        try:
            check_rotation(m[:3, :3], ROTATION_TOL)
        except ValueError as e:
            raise SceneFormatError(f"{where}: 'transform' {e}") from None
        if not 0.0 <= t <= 1.0:
            raise SceneFormatError(f"{where}: 'time' {t} outside [0, 1]")
        if t < prev_t:
            raise SceneFormatError(f"{where}: 'time' {t} decreases (previous {prev_t})")
        prev_t = t
        try:
            k = Intrinsics(float(intr["fx"]), float(intr["fy"]), float(intr["cx"]),
                           float(intr["cy"]), int(intr["width"]), int(intr["height"]))
        except (KeyError, TypeError, ValueError) as e:
            raise SceneFormatError(f"{where}: bad 'intrinsics' ({e})") from None
        img = read_png(ipath)
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        img = img[:, :, :3]
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise SceneFormatError(f"{where}: image size {img.shape[:2]} differs from {shape[:2]}")
        if img.shape[:2] != (k.height, k.width):
            raise SceneFormatError(f"{where}: image size {img.shape[:2]} does not match intrinsics "
                                   f"{(k.height, k.width)}")
        boxes = None
        if "boxes" in fd:
            boxes = []
            for bd in fd["boxes"]:
                try:
                    b = BBoxAnnotation(int(bd["class"]), int(bd["instance"]),
                                       (bd["x_min"], bd["y_min"], bd["x_max"], bd["y_max"]),
                                       dynamic=bool(bd.get("dynamic", True)))
                except (KeyError, TypeError, ValueError) as e:
                    raise SceneFormatError(f"{where}: bad box {bd} ({e})") from None
                if not b.within(k.width, k.height):
                    raise SceneFormatError(f"{where}: box {b.box} outside the image")
                boxes.append(replace(b, area=b.width * b.height))
        dmask, mrel = None, fd.get("mask")
        if mrel is not None:
            mp = root / mrel
            if not mp.is_file():
                raise SceneFormatError(f"{where}: mask file {mp} does not exist")
            dmask = read_png(mp) > 127
        pose = CameraPose(m[:3, :3], m[:3, 3], k, t)
        frames.append(Frame(img.astype(np.uint8), pose, boxes, dmask, rel, mrel))
    if not frames:
        raise SceneFormatError(f"{mpath}: no frames")
    return SceneDataset(str(doc.get("name", root.name)), bounds, frames)


def build_mask_images(ds: SceneDataset, palette: InstancePalette) -> SceneDataset:
    """Black images with each ground-truth box filled in its instance colour.

    Boxes are painted in palette order, so a later palette entry covers an earlier one.
    """
    frames = []
    for i, fr in enumerate(ds.frames):
        if fr.boxes is None:
            raise ValueError(f"frame {i} has no ground-truth boxes")
        img = np.zeros_like(fr.image)
        by_instance: dict[int, list] = {}
        for b in fr.boxes:
            palette.lookup(b.instance_id)  # raises on unknown instance
            by_instance.setdefault(b.instance_id, []).append(b)
        for entry in palette:
            for b in by_instance.get(entry.instance_id, []):
                x0, y0, x1, y1 = b.box
                img[y0:y1, x0:x1] = entry.color
        frames.append(Frame(img, fr.pose, fr.boxes, fr.dynamic_mask, fr.image_path, fr.mask_path))
    return SceneDataset(f"{ds.name}-masks", ds.bounds, frames)


# -- detection export ---------------------------------------------------------

@dataclass
class DetectionEntry:
    image: str   # relative to the export root
    label: str
    source: str


@dataclass
class DetectionExport:
    root: Path
    entries: list[DetectionEntry]
    classes: list[int]

    def __len__(self):
        return len(self.entries)

    def count(self, source: str) -> int:
        return sum(e.source == source for e in self.entries)


def format_label_line(class_id: int, box, width: int, height: int) -> str:
    x0, y0, x1, y1 = box
    cx = (x0 + x1) / 2.0 / width
    cy = (y0 + y1) / 2.0 / height
    return f"{int(class_id)} {cx:.6f} {cy:.6f} {(x1 - x0) / width:.6f} {(y1 - y0) / height:.6f}"


def parse_labels(path) -> list[tuple[int, float, float, float, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            c, *vals = line.split()
            out.append((int(c), *map(float, vals)))
    return out


def denormalize(record, width: int, height: int) -> tuple[float, float, float, float]:
    _, cx, cy, w, h = record
    return ((cx - w / 2) * width, (cy - h / 2) * height, (cx + w / 2) * width,
            (cy + h / 2) * height)


def _box_tuple(b):
    if isinstance(b, BBoxAnnotation):
        return b.class_id, b.box
    c, x0, y0, x1, y1 = b
    return int(c), (x0, y0, x1, y1)


def _write_export(root: Path, items, source: str, classes) -> list[DetectionEntry]:
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, image, boxes in items:
        h, w = image.shape[:2]
        lines = []
        for b in boxes:
            cls, box = _box_tuple(b)
            x0, y0, x1, y1 = box
            if x1 <= x0 or y1 <= y0:
                log.warning("skipping degenerate box %s in %s", box, name)
                continue
            if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
                raise ValueError(f"box {box} outside {w}x{h} image {name}")
            lines.append(format_label_line(cls, box, w, h))
        img_rel, lab_rel = f"images/{name}.png", f"labels/{name}.txt"
        write_png(root / img_rel, image if image.dtype == np.uint8 else to_u8(image))
        (root / lab_rel).write_text("".join(line + "\n" for line in lines))
        entries.append(DetectionEntry(img_rel, lab_rel, source))
    return entries


def _write_manifest(root: Path, entries, classes) -> None:
    (root / "manifest.json").write_text(
        json.dumps({e.image: e.source for e in entries}, indent=1))
    (root / "classes.txt").write_text("".join(f"{c}\n" for c in classes))


def export_detection(items, out_path, source: str, classes=None) -> DetectionExport:
    """Write ``items`` (``(name, image, boxes)`` triples) as a detection dataset."""
    items = list(items)
    if classes is None:
        classes = sorted({_box_tuple(b)[0] for _, _, boxes in items for b in boxes})
    out = Path(out_path)
    tmp = _atomic_dir(out)
    try:
        entries = _write_export(tmp, items, source, classes)
        _write_manifest(tmp, entries, classes)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit_dir(tmp, out)
    return DetectionExport(out, entries, list(classes))


def read_detection(path) -> DetectionExport:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    classes = [int(x) for x in (root / "classes.txt").read_text().split()]
    entries = [DetectionEntry(img, "labels/" + Path(img).stem + ".txt", src)
               for img, src in manifest.items()]
    return DetectionExport(root, entries, classes)


def assemble_hybrid(real: DetectionExport, synthetic: DetectionExport, out_path) -> DetectionExport:
    """Union of two exports; name collisions get a numeric suffix, tags are kept."""
    a, b = set(real.classes), set(synthetic.classes)
    if not (a <= b or b <= a):
        raise ValueError(f"incompatible class lists: {real.classes} vs {synthetic.classes}")
    classes = sorted(set(real.classes) | set(synthetic.classes))
    out = Path(out_path)
    tmp = _atomic_dir(out)
    try:
        (tmp / "images").mkdir()
        (tmp / "labels").mkdir()
        used: set[str] = set()
        entries = []
        for src in (real, synthetic):
            for e in src.entries:
                stem = base = Path(e.image).stem
                k = 1
                while stem in used:
                    stem = f"{base}_{k}"
                    k += 1
                used.add(stem)
                shutil.copyfile(src.root / e.image, tmp / "images" / f"{stem}.png")
                shutil.copyfile(src.root / e.label, tmp / "labels" / f"{stem}.txt")
                entries.append(DetectionEntry(f"images/{stem}.png", f"labels/{stem}.txt", e.source))
        _write_manifest(tmp, entries, classes)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit_dir(tmp, out)
    return DetectionExport(out, entries, classes)
