"""Object-level static/dynamic classification from stereo geometry.

Objects detected in a past reference frame and in the current frame are
associated through descriptor matches of the features inside their boxes.
Each matched pair is triangulated in both frames, moved into world
coordinates with the respective camera poses, and the distances between the
two 3D measurements decide whether the object moved.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .features import FrameObservation, hamming_matrix, mutual_best
from .geometry import MIN_DISPARITY, CameraIntrinsics, Pose, triangulate_stereo_batch

#: Label of synthetic occluders; they are masks, not objects, and never get classified.
OCCLUDER_LABEL = "occluder"


class EmptyHistory(ValueError):
    pass


class MotionLabel(str, enum.Enum):
    STATIC = "Static"
    DYNAMIC = "Dynamic"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class ClassifierParams:
    sigma_bkg: float = 0.12
    inlier_fraction: float = 0.7
    ref_lag_n: int = 2
    min_association_matches: int = 8
    min_points: int = 6
    descriptor_max_distance: int = 64

    def __post_init__(self):
        if not self.sigma_bkg > 0:
            raise ValueError("sigma_bkg must be positive")
        if not 0 < self.inlier_fraction < 1:
            raise ValueError("inlier_fraction must lie in (0, 1)")
        if self.ref_lag_n < 1:
            raise ValueError("ref_lag_n must be >= 1")


@dataclass(frozen=True)
class MotionState:
    label: MotionLabel
    score: float = float("nan")
    errors: tuple[float, ...] = ()

    @property
    def is_static(self) -> bool:
        return self.label is MotionLabel.STATIC


UNKNOWN = MotionState(MotionLabel.UNKNOWN)


@dataclass(frozen=True, eq=False)
class ObjectAssociation:
    ref_object_id: int
    cur_object_id: int
    pairs: np.ndarray  # (P, 2) feature indices (ref, cur)
    ref_pixels: np.ndarray = field(repr=False, default=None)  # (P, 3) stereo observations
    cur_pixels: np.ndarray = field(repr=False, default=None)

    @property
    def matched_feature_pairs(self) -> list[tuple[int, int]]:
        return [tuple(p) for p in self.pairs.tolist()]


def default_ref_lag(fps: float) -> int:
    return max(1, int(round(fps / 3.0)))


def ref_lag_range(fps: float) -> tuple[int, int]:
    """Frames back for the reference frame, FPS/3 to FPS/2, for machines near 4 km/h."""
    return max(1, int(round(fps / 3.0))), max(1, int(round(fps / 2.0)))


def select_reference_frame(history: Sequence, n: int):
    """Item ``n`` positions before the newest entry, or the oldest if history is short."""
    if len(history) == 0:
        raise EmptyHistory("no frames to pick a reference from")
    return history[max(0, len(history) - 1 - n)]


def _support(det, u, v) -> np.ndarray:
    # the silhouette keeps background seen around the object out of the evidence
    if det.pixel_region is not None:
        return det.pixel_region.contains(u, v)
    return det.bbox.contains(u, v)


def _features_in_boxes(frame: FrameObservation, detections):
    """Stereo feature indices and, per detection, a membership row."""
    px = frame.features.pixels
    usable = frame.features.is_stereo & ((px[:, 0] - px[:, 2]) > MIN_DISPARITY)
    if not detections:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 0), dtype=bool)
    member = np.array([_support(d, px[:, 0], px[:, 1]) & usable for d in detections])
    idx = np.nonzero(member.any(axis=0))[0]
    return idx, member[:, idx]


def _classifiable(frame: FrameObservation):
    return [d for d in frame.detections if d.class_label != OCCLUDER_LABEL]


def associate_objects(
    ref: FrameObservation, cur: FrameObservation, params: ClassifierParams = ClassifierParams()
) -> list[ObjectAssociation]:
    ref_dets, cur_dets = _classifiable(ref), _classifiable(cur)
    ref_idx, ref_member = _features_in_boxes(ref, ref_dets)
    cur_idx, cur_member = _features_in_boxes(cur, cur_dets)
    if len(ref_idx) == 0 or len(cur_idx) == 0:
        return []

    dist = hamming_matrix(ref.features.descriptors[ref_idx], cur.features.descriptors[cur_idx])
    rows, cols = np.nonzero(dist <= params.descriptor_max_distance)
    keep = mutual_best(rows, cols, dist[rows, cols])
    rows, cols = rows[keep], cols[keep]

    # shared-match counts for every (ref object, cur object) pair
    counts = ref_member[:, rows].astype(np.int32) @ cur_member[:, cols].T.astype(np.int32)
    candidates = [
        (int(counts[i, j]), ref_dets[i].object_id, cur_dets[j].object_id, i, j)
        for i, j in zip(*np.nonzero(counts >= params.min_association_matches))
    ]
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

    used_ref, used_cur, out = set(), set(), []
    for _, ref_id, cur_id, i, j in candidates:
        if ref_id in used_ref or cur_id in used_cur:
            continue
        used_ref.add(ref_id)
        used_cur.add(cur_id)
        sel = ref_member[i, rows] & cur_member[j, cols]
        pairs = np.column_stack([ref_idx[rows[sel]], cur_idx[cols[sel]]])
        out.append(ObjectAssociation(
            ref_id, cur_id, pairs,
            ref.features.pixels[pairs[:, 0]], cur.features.pixels[pairs[:, 1]],
        ))
    out.sort(key=lambda a: (a.ref_object_id, a.cur_object_id))
    return out


def object_point_errors(assoc: ObjectAssociation, ref_pose: Pose, cur_pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """World-frame distances between each pair's two triangulations.

    Poses are camera-to-world. Pairs that cannot be triangulated in either
    frame are dropped.
    """
    p_ref, ok_ref = triangulate_stereo_batch(K, assoc.ref_pixels)
    p_cur, ok_cur = triangulate_stereo_batch(K, assoc.cur_pixels)
    ok = ok_ref & ok_cur
    w_ref = ref_pose.apply(p_ref[ok])
    w_cur = cur_pose.apply(p_cur[ok])
    return np.linalg.norm(w_ref - w_cur, axis=1)


def kept_errors(errors: np.ndarray) -> np.ndarray:
    """Errors strictly below the median of the full list.

    When ties at the low end leave nothing strictly below the median, the
    points equal to it are kept instead (for all-equal errors this is the
    whole list).
    """
    errors = np.asarray(errors, dtype=float)
    if len(errors) == 0:
        return errors
    med = np.median(errors)
    kept = errors[errors < med]
    if len(kept) == 0:
        kept = errors[errors <= med]
    return kept


def classify(errors, params: ClassifierParams = ClassifierParams()) -> MotionState:
    errors = np.asarray(errors, dtype=float)
    kept = kept_errors(errors)
    if len(kept) < params.min_points:
        return MotionState(MotionLabel.UNKNOWN, float("nan"), tuple(errors.tolist()))
    score = float(np.count_nonzero(kept < 3.0 * params.sigma_bkg)) / len(kept)
    label = MotionLabel.STATIC if score > params.inlier_fraction else MotionLabel.DYNAMIC
    return MotionState(label, score, tuple(errors.tolist()))


def classify_frame_objects(
    ref: FrameObservation,
    cur: FrameObservation,
    ref_pose: Pose,
    cur_pose: Pose,
    K: CameraIntrinsics,
    params: ClassifierParams = ClassifierParams(),
) -> dict[int, MotionState]:
    """Motion state of every object detected in ``cur``; unassociated ones are Unknown."""
    states: dict[int, MotionState] = {d.object_id: UNKNOWN for d in cur.detections}
    for assoc in associate_objects(ref, cur, params):
        errors = object_point_errors(assoc, ref_pose, cur_pose, K)
        states[assoc.cur_object_id] = classify(errors, params)
    return dict(sorted(states.items()))


def static_ids(states: Mapping[int, MotionState]) -> list[int]:
    """Ids safe to unmask: Unknown is treated exactly like Dynamic."""
    return sorted(i for i, s in states.items() if s.label is MotionLabel.STATIC)


def monte_carlo_sigma_bkg(
    K: CameraIntrinsics, depth: float, pixel_sigma: float, samples: int = 10_000, seed: int = 0
) -> float:
    """Empirical std of the 3D distance between two noisy stereo triangulations of one static point.

    Used to calibrate ``sigma_bkg`` for a given rig and pixel noise level.
    """
    rng = np.random.default_rng(seed)
    # points spread over the image at the given depth
    u = rng.uniform(0, K.width, samples)
    v = rng.uniform(0, K.height, samples)
    clean = np.column_stack([u, v, u - K.bf / depth])
    a, ok_a = triangulate_stereo_batch(K, clean + rng.normal(0, pixel_sigma, clean.shape))
    b, ok_b = triangulate_stereo_batch(K, clean + rng.normal(0, pixel_sigma, clean.shape))
    ok = ok_a & ok_b
    d = np.linalg.norm(a[ok] - b[ok], axis=1)
    return float(np.sqrt(np.mean(d**2)))
