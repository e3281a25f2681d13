"""Occlusion masks built from object detections.

A mask bit of 1 marks a pixel whose features must not be used for ego-motion
tracking. Bounding-box masks are cheap; pixel-wise masks (from instance
silhouettes) are tighter and only worth their cost when boxes swallow a large
share of the frame, which is what :func:`hierarchical_mask` decides.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_TAU_MAR = 0.5

#: Average wall time of one detection pass producing box masks (seconds).
BBOX_MASK_SECONDS = 0.0207
#: Extra wall time of instance segmentation for a pixel-wise mask (seconds).
PIXELWISE_MASK_SECONDS = 0.12


class UnknownObjectId(KeyError):
    pass


class MaskTier(str, enum.Enum):
    BBOX = "BBox"
    PIXELWISE = "PixelWise"


@dataclass(frozen=True)
class BoundingBox:
    """Pixel box, half-open on the max edges."""

    u_min: int
    v_min: int
    u_max: int
    v_max: int

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError(f"empty bounding box {self}")

    @property
    def area(self) -> int:
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)

    @classmethod
    def clipped(cls, u_min, v_min, u_max, v_max, width: int, height: int) -> BoundingBox | None:
        """Integer box covering the real-valued extent, clipped to the image; None if empty."""
        u0 = max(0, int(np.floor(u_min)))
        v0 = max(0, int(np.floor(v_min)))
        u1 = min(width, int(np.ceil(u_max)))
        v1 = min(height, int(np.ceil(v_max)))
        if u0 >= u1 or v0 >= v1:
            return None
        return cls(u0, v0, u1, v1)

    def contains(self, u, v):
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= self.u_min) & (u < self.u_max) & (v >= self.v_min) & (v < self.v_max)

    def as_list(self) -> list[int]:
        return [self.u_min, self.v_min, self.u_max, self.v_max]


@dataclass(frozen=True, eq=False)
class PixelRegion:
    """Run-length encoded pixel set: rows of ``(v, u_start, u_end)``, half-open."""

    runs: np.ndarray

    def __post_init__(self):
        runs = np.asarray(self.runs, dtype=np.int32).reshape(-1, 3)
        if len(runs):
            if np.any(runs[:, 2] <= runs[:, 1]) or np.any(runs < 0):
                raise ValueError("runs must be non-empty and non-negative")
            order = np.lexsort((runs[:, 1], runs[:, 0]))
            if not np.array_equal(order, np.arange(len(runs))):
                raise ValueError("runs must be sorted by (v, u_start)")
            same_row = runs[1:, 0] == runs[:-1, 0]
            if np.any(same_row & (runs[1:, 1] < runs[:-1, 2])):
                raise ValueError("runs overlap")
        runs.flags.writeable = False
        object.__setattr__(self, "runs", runs)

    def __eq__(self, other):
        return isinstance(other, PixelRegion) and np.array_equal(self.runs, other.runs)

    def __len__(self):
        return len(self.runs)

    @property
    def area(self) -> int:
        return int(np.sum(self.runs[:, 2] - self.runs[:, 1]))

    @classmethod
    def from_mask(cls, bits: np.ndarray) -> PixelRegion:
        bits = np.asarray(bits, dtype=bool)
        h, w = bits.shape
        padded = np.zeros((h, w + 2), dtype=np.int8)
        padded[:, 1:-1] = bits
        d = np.diff(padded, axis=1)
        rs, cs = np.nonzero(d == 1)
        re, ce = np.nonzero(d == -1)
        # np.nonzero is row-major so starts and ends pair up in order
        assert np.array_equal(rs, re)
        return cls(np.column_stack([rs, cs, ce]))

    def to_mask(self, width: int, height: int) -> np.ndarray:
        bits = np.zeros((height, width), dtype=bool)
        self.paint(bits)
        return bits

    def paint(self, bits: np.ndarray, value: bool = True) -> None:
        height, width = bits.shape
        for v, u0, u1 in self.runs:
            if v >= height or u1 > width:
                raise ValueError(f"run ({v}, {u0}, {u1}) outside {width}x{height}")
            bits[v, u0:u1] = value

    def contains(self, u, v) -> np.ndarray:
        """Membership of the pixels containing the (sub-pixel) points ``(u, v)``."""
        u = np.floor(np.asarray(u, dtype=float)).astype(np.int64)
        v = np.floor(np.asarray(v, dtype=float)).astype(np.int64)
        if not len(self.runs):
            return np.zeros(u.shape, dtype=bool)
        r = self.runs.astype(np.int64)
        stride = 1 << 32
        i = np.searchsorted(r[:, 0] * stride + r[:, 1], v * stride + u, side="right") - 1
        ok = i >= 0
        i = np.maximum(i, 0)
        return ok & (r[i, 0] == v) & (u >= r[i, 1]) & (u < r[i, 2])

    def within(self, box: BoundingBox) -> bool:
        if not len(self.runs):
            return True
        r = self.runs
        return bool(
            r[:, 0].min() >= box.v_min and r[:, 0].max() < box.v_max
            and r[:, 1].min() >= box.u_min and r[:, 2].max() <= box.u_max
        )

    def to_list(self) -> list[int]:
        return self.runs.ravel().tolist()

    @classmethod
    def from_list(cls, flat: Sequence[int]) -> PixelRegion:
        if len(flat) % 3:
            raise ValueError("flat run list length must be a multiple of 3")
        return cls(np.asarray(flat, dtype=np.int32).reshape(-1, 3))


@dataclass(frozen=True)
class ObjectDetection:
    object_id: int
    class_label: str
    a_priori_dynamic: bool
    bbox: BoundingBox
    pixel_region: PixelRegion | None = None

    def __post_init__(self):
        if self.pixel_region is not None and not self.pixel_region.within(self.bbox):
            raise ValueError(f"pixel region of object {self.object_id} leaves its bounding box")


@dataclass(frozen=True, eq=False)
class OcclusionMask:
    bits: np.ndarray
    tier: MaskTier = MaskTier.BBOX
    contributor_ids: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "contributor_ids", tuple(self.contributor_ids))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def masked_pixels(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other):
        return (
            isinstance(other, OcclusionMask)
            and self.tier == other.tier
            and self.contributor_ids == other.contributor_ids
            and np.array_equal(self.bits, other.bits)
        )

    def is_masked(self, u, v) -> np.ndarray:
        """Mask lookup at (possibly sub-pixel) coordinates; out-of-image counts as unmasked."""
        u = np.floor(np.asarray(u, dtype=float)).astype(np.int64)
        v = np.floor(np.asarray(v, dtype=float)).astype(np.int64)
        inside = (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        out = np.zeros(u.shape, dtype=bool)
        out[inside] = self.bits[v[inside], u[inside]]
        return out

    @classmethod
    def blank(cls, width: int, height: int, tier: MaskTier = MaskTier.BBOX) -> OcclusionMask:
        return cls(np.zeros((height, width), dtype=bool), tier, ())


def masked_area_ratio(mask: OcclusionMask) -> float:
    return mask.masked_pixels / float(mask.width * mask.height)


def _contributors(detections: Iterable[ObjectDetection]) -> list[ObjectDetection]:
    return [d for d in detections if d.a_priori_dynamic]


def _paint_boxes(bits: np.ndarray, detections: Iterable[ObjectDetection]) -> None:
    for d in detections:
        b = d.bbox
        bits[b.v_min:b.v_max, b.u_min:b.u_max] = True


def _paint_regions(bits: np.ndarray, detections: Iterable[ObjectDetection]) -> None:
    for d in detections:
        if d.pixel_region is None:
            # no silhouette: over-mask with the box
            _paint_boxes(bits, [d])
        else:
            d.pixel_region.paint(bits)


def _rasterize(detections, width, height, tier: MaskTier) -> OcclusionMask:
    contrib = _contributors(detections)
    bits = np.zeros((height, width), dtype=bool)
    if tier is MaskTier.BBOX:
        _paint_boxes(bits, contrib)
    else:
        _paint_regions(bits, contrib)
    return OcclusionMask(bits, tier, tuple(d.object_id for d in contrib))


def rasterize_bbox_mask(detections: Sequence[ObjectDetection], width: int, height: int) -> OcclusionMask:
    return _rasterize(detections, width, height, MaskTier.BBOX)


def rasterize_pixelwise_mask(detections: Sequence[ObjectDetection], width: int, height: int) -> OcclusionMask:
    return _rasterize(detections, width, height, MaskTier.PIXELWISE)


def check_tau_mar(tau: float) -> float:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau_mar must lie in (0, 1), got {tau}")
    return float(tau)


def hierarchical_mask(
    detections: Sequence[ObjectDetection], width: int, height: int, tau: float = DEFAULT_TAU_MAR
) -> OcclusionMask:
    """Box mask unless its masked area ratio reaches ``tau``; then the pixel-wise mask."""
    check_tau_mar(tau)
    mask = rasterize_bbox_mask(detections, width, height)
    if masked_area_ratio(mask) >= tau:
        mask = rasterize_pixelwise_mask(detections, width, height)
    return mask


def unmask_objects(
    mask: OcclusionMask, static_ids: Iterable[int], detections: Sequence[ObjectDetection]
) -> OcclusionMask:
    """Clear the area of objects found static, keeping pixels another masked object still covers."""
    static_ids = set(static_ids)
    known = set(mask.contributor_ids) | {d.object_id for d in detections}
    unknown = static_ids - known
    if unknown:
        raise UnknownObjectId(sorted(unknown))
    if not static_ids & set(mask.contributor_ids):
        return mask
    by_id = {d.object_id: d for d in detections}
    missing = [i for i in mask.contributor_ids if i not in by_id]
    if missing:
        raise UnknownObjectId(f"mask contributors {missing} absent from detections")
    keep = [by_id[i] for i in mask.contributor_ids if i not in static_ids]
    bits = np.zeros_like(mask.bits)
    if mask.tier is MaskTier.BBOX:
        _paint_boxes(bits, keep)
    else:
        _paint_regions(bits, keep)
    # never set a bit the input mask did not have
    bits &= mask.bits
    return OcclusionMask(bits, mask.tier, tuple(d.object_id for d in keep))


def mask_cost(tier: MaskTier | str, count_frames: int) -> float:
    """Modelled mask-generation time in seconds; reporting only."""
    tier = MaskTier(tier)
    per_frame = BBOX_MASK_SECONDS
    if tier is MaskTier.PIXELWISE:
        per_frame += PIXELWISE_MASK_SECONDS
    return per_frame * count_frames


def write_pgm(mask: OcclusionMask, path: str | Path) -> None:
    """Binary PGM, 0 for static and 255 for masked pixels."""
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + (mask.bits.astype(np.uint8) * 255).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w) > 0
