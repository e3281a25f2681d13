"""Per-frame observation containers.

Features are stored column-wise (one numpy array per attribute) because the
tracker only ever works on whole batches; :class:`StereoFeature` is a
convenience view of a single row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import CameraIntrinsics
from .masking import ObjectDetection

DESCRIPTOR_BYTES = 32  # 256-bit binary descriptors
MAX_SCALE_LEVEL = 7
NO_HINT = -1


@dataclass(frozen=True, eq=False)
class StereoFeature:
    u_l: float
    v_l: float
    u_r: float | None  # None for a monocular feature
    descriptor: bytes
    scale_level: int = 0
    landmark_hint: int | None = None

    @property
    def is_stereo(self) -> bool:
        return self.u_r is not None


@dataclass(frozen=True, eq=False)
class FeatureSet:
    pixels: np.ndarray  # (N, 3) u_l, v_l, u_r; u_r is NaN for monocular features
    descriptors: np.ndarray  # (N, 32) uint8
    scale_levels: np.ndarray  # (N,) int8
    hints: np.ndarray  # (N,) int64, NO_HINT when unknown; never read by the tracker

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 3)
        n = len(pixels)
        desc = np.asarray(self.descriptors, dtype=np.uint8).reshape(n, DESCRIPTOR_BYTES)
        levels = np.asarray(self.scale_levels, dtype=np.int8).reshape(n)
        hints = np.asarray(self.hints, dtype=np.int64).reshape(n)
        if n and (levels.min() < 0 or levels.max() > MAX_SCALE_LEVEL):
            raise ValueError("scale level outside [0, 7]")
        stereo = ~np.isnan(pixels[:, 2])
        if np.any(pixels[stereo, 0] - pixels[stereo, 2] <= 0):
            raise ValueError("stereo feature with non-positive disparity")
        for name, arr in (("pixels", pixels), ("descriptors", desc), ("scale_levels", levels), ("hints", hints)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls) -> FeatureSet:
        return cls(np.zeros((0, 3)), np.zeros((0, DESCRIPTOR_BYTES), np.uint8), np.zeros(0, np.int8), np.zeros(0, np.int64))

    @classmethod
    def from_features(cls, feats: Sequence[StereoFeature]) -> FeatureSet:
        if not feats:
            return cls.empty()
        pixels = np.array([[f.u_l, f.v_l, np.nan if f.u_r is None else f.u_r] for f in feats])
        desc = np.frombuffer(b"".join(f.descriptor for f in feats), dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        levels = [f.scale_level for f in feats]
        hints = [NO_HINT if f.landmark_hint is None else f.landmark_hint for f in feats]
        return cls(pixels, desc, levels, hints)

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i: int) -> StereoFeature:
        u_l, v_l, u_r = self.pixels[i]
        hint = int(self.hints[i])
        return StereoFeature(
            float(u_l), float(v_l), None if np.isnan(u_r) else float(u_r),
            self.descriptors[i].tobytes(), int(self.scale_levels[i]), None if hint == NO_HINT else hint,
        )

    @property
    def is_stereo(self) -> np.ndarray:
        return ~np.isnan(self.pixels[:, 2])

    def subset(self, index) -> FeatureSet:
        return FeatureSet(self.pixels[index], self.descriptors[index], self.scale_levels[index], self.hints[index])

    def equals(self, other: FeatureSet) -> bool:
        return (
            np.array_equal(self.pixels, other.pixels, equal_nan=True)
            and np.array_equal(self.descriptors, other.descriptors)
            and np.array_equal(self.scale_levels, other.scale_levels)
            and np.array_equal(self.hints, other.hints)
        )


@dataclass(frozen=True, eq=False)
class FrameObservation:
    timestamp: float
    features: FeatureSet
    detections: tuple[ObjectDetection, ...] = field(default_factory=tuple)
    intrinsics: CameraIntrinsics | None = None

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))

    def detection(self, object_id: int) -> ObjectDetection:
        for d in self.detections:
            if d.object_id == object_id:
                return d
        raise KeyError(object_id)

    def equals(self, other: FrameObservation) -> bool:
        return (
            self.timestamp == other.timestamp
            and self.features.equals(other.features)
            and self.detections == other.detections
            and self.intrinsics == other.intrinsics
        )


def hamming_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Hamming distance between two ``(N, 32)`` uint8 descriptor arrays."""
    return np.bitwise_count(np.bitwise_xor(a, b)).sum(axis=-1, dtype=np.int32)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances ``(len(a), len(b))`` via one float matmul."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int32)
    ba = np.unpackbits(a, axis=1).astype(np.float32)
    bb = np.unpackbits(b, axis=1).astype(np.float32)
    common = ba @ bb.T
    d = ba.sum(axis=1)[:, None] + bb.sum(axis=1)[None, :] - 2.0 * common
    return np.rint(d).astype(np.int32)


def mutual_best(rows: np.ndarray, cols: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Indices of candidate pairs that are each other's best match.

    ``rows``/``cols``/``dist`` describe sparse candidate pairs. Ties break
    towards the smaller partner index so the result is deterministic.
    """
    if len(rows) == 0:
        return np.zeros(0, dtype=np.int64)
    # best per row: sort by (row, dist, col)
    order = np.lexsort((cols, dist, rows))
    first = np.ones(len(order), dtype=bool)
    first[1:] = rows[order][1:] != rows[order][:-1]
    best_row = np.zeros(len(rows), dtype=bool)
    best_row[order[first]] = True
    order = np.lexsort((rows, dist, cols))
    first = np.ones(len(order), dtype=bool)
    first[1:] = cols[order][1:] != cols[order][:-1]
    best_col = np.zeros(len(rows), dtype=bool)
    best_col[order[first]] = True
    return np.nonzero(best_row & best_col)[0]
