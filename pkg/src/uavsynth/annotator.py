"""Bounding boxes from rendered mask images.

A mask image rendered by the box field is thresholded, snapped to the nearest
instance colour, split into 4-connected blobs and each blob becomes a tight
box. Boxes are ``(x_min, y_min, x_max, y_max)`` with exclusive maxima.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

BACKGROUND = -1
FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class PaletteEntry:
    instance_id: int
    class_id: int
    color: tuple[int, int, int]


class InstancePalette:
    """Ordered instance colours; entries must differ by >= ``min_separation`` (max-channel)."""

    def __init__(self, entries, min_separation: int = 60):
        self.entries = [e if isinstance(e, PaletteEntry)
                        else PaletteEntry(int(e[0]), int(e[1]), tuple(int(c) for c in e[2]))
                        for e in entries]
        ids = [e.instance_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("palette instance ids must be unique")
        cols = self.colors.astype(int)
        for i in range(len(cols)):
            for j in range(i + 1, len(cols)):
                if np.abs(cols[i] - cols[j]).max() < min_separation:
                    raise ValueError(f"palette colours {tuple(cols[i])} and {tuple(cols[j])} "
                                     f"closer than {min_separation}")

    @classmethod
    def generate(cls, instances, class_ids=None) -> "InstancePalette":
        """Palette for ``instances`` drawn from a fixed list of well-separated colours.

        Colours with two or more lit channels come first: on a black background
        they give a box field a net positive density gradient from the start,
        where a single-channel colour can leave its instance empty.
        """
        base = [(255, 255, 0), (255, 0, 255), (0, 255, 255), (255, 255, 255), (255, 128, 0),
                (128, 0, 255), (0, 128, 255), (255, 0, 128), (128, 255, 0), (0, 255, 128),
                (255, 0, 0), (0, 255, 0), (0, 0, 255), (128, 128, 255)]
        instances = list(instances)
        if len(instances) > len(base):
            raise ValueError(f"at most {len(base)} instances supported")
        class_ids = class_ids or [0] * len(instances)
        return cls([PaletteEntry(i, c, base[k]) for k, (i, c) in enumerate(zip(instances, class_ids))])

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def colors(self) -> np.ndarray:
        return np.array([e.color for e in self.entries], dtype=np.uint8).reshape(-1, 3)

    def lookup(self, instance_id: int) -> PaletteEntry:
        for e in self.entries:
            if e.instance_id == instance_id:
                return e
        raise KeyError(f"instance {instance_id} not in palette")

    def to_json(self) -> list:
        return [{"instance": e.instance_id, "class": e.class_id, "color": list(e.color)}
                for e in self.entries]

    @classmethod
    def from_json(cls, data) -> "InstancePalette":
        return cls([PaletteEntry(int(d["instance"]), int(d["class"]), tuple(d["color"]))
                    for d in data])


@dataclass(frozen=True)
class BBoxAnnotation:
    class_id: int
    instance_id: int
    box: tuple[int, int, int, int]
    area: int = 0
    dynamic: bool = True

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        object.__setattr__(self, "box", tuple(int(b) for b in self.box))

    @property
    def width(self) -> int:
        return self.box[2] - self.box[0]

    @property
    def height(self) -> int:
        return self.box[3] - self.box[1]

    def within(self, width: int, height: int) -> bool:
        x0, y0, x1, y1 = self.box
        return 0 <= x0 and 0 <= y0 and x1 <= width and y1 <= height


@dataclass
class Blob:
    instance_id: int
    pixels: np.ndarray  # (K, 2) rows, cols in raster order

    @property
    def area(self) -> int:
        return len(self.pixels)


def _as_u8(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize_mask(image, palette: InstancePalette, threshold: float = 0.3,
                  tolerance: int = 80) -> np.ndarray:
    """Label image of instance ids (``-1`` for background).

    ``image`` is ``(H, W, 3)`` uint8 or float in ``[0, 1]``. A pixel is labelled
    with its nearest palette colour (max-channel distance, first entry wins a
    tie) when its brightest channel reaches ``threshold`` and that distance is
    within ``tolerance``.
    """
    if len(palette) == 0:
        raise ValueError("empty palette")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    img = _as_u8(image).astype(np.int16)
    cols = palette.colors.astype(np.int16)
    dist = np.abs(img[:, :, None, :] - cols[None, None, :, :]).max(axis=-1)
    nearest = dist.argmin(axis=-1)
    best = np.take_along_axis(dist, nearest[..., None], axis=-1)[..., 0]
    bright = img.max(axis=-1) >= threshold * 255.0
    ids = np.array([e.instance_id for e in palette.entries])
    return np.where(bright & (best <= tolerance), ids[nearest], BACKGROUND)


def connected_components(labels) -> list[Blob]:
    """4-connected blobs per label value, ordered by their first pixel in raster order."""
    labels = np.asarray(labels)
    blobs = []
    for value in np.unique(labels):
        if value == BACKGROUND:
            continue
        comp, count = ndimage.label(labels == value, structure=FOUR_CONNECTED)
        if count == 0:
            continue
        flat = comp.ravel()
        order = np.argsort(flat, kind="stable")
        sorted_ids = flat[order]
        starts = np.searchsorted(sorted_ids, np.arange(1, count + 1))
        ends = np.searchsorted(sorted_ids, np.arange(1, count + 1), side="right")
        for s, e in zip(starts, ends):
            idx = order[s:e]
            blobs.append(Blob(int(value), np.stack(np.unravel_index(idx, labels.shape), axis=1)))
    blobs.sort(key=lambda b: (int(b.pixels[0, 0]), int(b.pixels[0, 1])))
    return blobs


def blobs_to_boxes(blobs, min_area: int = 4, palette: InstancePalette | None = None,
                   class_id: int = 0) -> list[BBoxAnnotation]:
    """Tight boxes around blobs with at least ``min_area`` pixels."""
    if min_area < 1:
        raise ValueError("min_area must be >= 1")
    out = []
    for b in blobs:
        if b.area < min_area:
            continue
        rows, cols = b.pixels[:, 0], b.pixels[:, 1]
        cls = palette.lookup(b.instance_id).class_id if palette is not None else class_id
        out.append(BBoxAnnotation(cls, b.instance_id,
                                  (int(cols.min()), int(rows.min()),
                                   int(cols.max()) + 1, int(rows.max()) + 1), b.area))
    return out


def annotate(image, palette: InstancePalette, threshold: float = 0.3, tolerance: int = 80,
             min_area: int = 4) -> list[BBoxAnnotation]:
    """Instance-colour path: mask image to per-instance boxes."""
    labels = quantize_mask(image, palette, threshold, tolerance)
    return blobs_to_boxes(connected_components(labels), min_area, palette)


def annotate_scalar_mask(mask, threshold: float = 0.3, class_id: int = 0,
                         min_area: int = 4) -> list[BBoxAnnotation]:
    """Scalar-mask path: class-only boxes, blobs numbered in raster order."""
    labels = np.where(np.asarray(mask) >= threshold, 0, BACKGROUND)
    blobs = connected_components(labels)
    for i, b in enumerate(blobs):
        b.instance_id = i
    return blobs_to_boxes(blobs, min_area, class_id=class_id)


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0
