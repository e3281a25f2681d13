"""Two-round stereo ego-motion tracking against a masked landmark map.

Round one matches map points to features outside the occlusion mask and
solves a robust motion-only bundle adjustment. With that rough pose, detected
objects are checked for motion against a reference frame; the ones found
static are unmasked and the pose is solved again with the extra features.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .features import FeatureSet, FrameObservation, hamming_distance, mutual_best
from .geometry import (
    CameraIntrinsics,
    Pose,
    compose,
    invert,
    pose_exp,
    triangulate_stereo_batch,
)
from .masking import (
    DEFAULT_TAU_MAR,
    MaskTier,
    OcclusionMask,
    hierarchical_mask,
    masked_area_ratio,
    rasterize_bbox_mask,
    rasterize_pixelwise_mask,
    unmask_objects,
)
from .motion_state import (
    ClassifierParams,
    MotionLabel,
    MotionState,
    classify_frame_objects,
    select_reference_frame,
)

SCALE_FACTOR = 1.2
CHI2_MONO_95 = 5.991
CHI2_STEREO_95 = 7.815


class InsufficientMatches(RuntimeError):
    pass


class SolverDiverged(RuntimeError):
    pass


class MaskPolicy(str, enum.Enum):
    HIERARCHICAL = "hierarchical"
    BBOX = "bbox"
    PIXELWISE = "pixelwise"
    NONE = "none"


class TrackingStatus(str, enum.Enum):
    TRACKED = "Tracked"
    LOST = "Lost"


@dataclass(frozen=True)
class TrackingConfig:
    tau_mar: float = DEFAULT_TAU_MAR
    classifier: ClassifierParams = field(default_factory=ClassifierParams)
    huber_delta_mono: float = math.sqrt(CHI2_MONO_95)
    huber_delta_stereo: float = math.sqrt(CHI2_STEREO_95)
    max_iterations: int = 10
    match_window: float = 15.0
    descriptor_max_distance: int = 64
    min_inliers: int = 15
    keyframe_interval: int = 5
    prune_after_keyframes: int = 30
    outlier_rounds: int = 3
    mask_policy: MaskPolicy = MaskPolicy.HIERARCHICAL
    refine_static: bool = True

    def __post_init__(self):
        if not 0 < self.tau_mar < 1:
            raise ValueError("tau_mar must lie in (0, 1)")
        for name in ("huber_delta_mono", "huber_delta_stereo", "max_iterations", "match_window",
                     "descriptor_max_distance", "min_inliers", "keyframe_interval", "prune_after_keyframes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


# --------------------------------------------------------------------------
# Landmark map


@dataclass(frozen=True)
class MapPoint:
    position: np.ndarray
    descriptor: bytes
    observations: int


class LandmarkMap:
    """Column-wise store of triangulated world points."""

    def __init__(self):
        self.positions = np.zeros((0, 3))
        self.descriptors = np.zeros((0, 32), dtype=np.uint8)
        self.observations = np.zeros(0, dtype=np.int64)
        self.last_seen = np.zeros(0, dtype=np.int64)  # keyframe counter of last match
        self.hints = np.zeros(0, dtype=np.int64)  # audit tag copied from the source feature

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> MapPoint:
        return MapPoint(self.positions[i].copy(), self.descriptors[i].tobytes(), int(self.observations[i]))

    def add(self, positions, descriptors, keyframe: int, hints) -> int:
        n = len(positions)
        self.positions = np.vstack([self.positions, positions])
        self.descriptors = np.vstack([self.descriptors, descriptors])
        self.observations = np.concatenate([self.observations, np.ones(n, dtype=np.int64)])
        self.last_seen = np.concatenate([self.last_seen, np.full(n, keyframe, dtype=np.int64)])
        self.hints = np.concatenate([self.hints, np.asarray(hints, dtype=np.int64)])
        return n

    def keep(self, index) -> None:
        self.positions = self.positions[index]
        self.descriptors = self.descriptors[index]
        self.observations = self.observations[index]
        self.last_seen = self.last_seen[index]
        self.hints = self.hints[index]


@dataclass(frozen=True, eq=False)
class Matches:
    map_idx: np.ndarray
    feat_idx: np.ndarray
    points: np.ndarray  # (P, 3) world
    observations: np.ndarray  # (P, 3); u_r NaN for monocular
    levels: np.ndarray

    def __len__(self):
        return len(self.map_idx)

    def subset(self, index) -> Matches:
        return Matches(self.map_idx[index], self.feat_idx[index], self.points[index],
                       self.observations[index], self.levels[index])

    @classmethod
    def from_arrays(cls, points, observations, levels=None) -> Matches:
        n = len(points)
        levels = np.zeros(n, dtype=np.int8) if levels is None else np.asarray(levels)
        return cls(np.arange(n), np.arange(n), np.asarray(points, dtype=float),
                   np.asarray(observations, dtype=float), levels)


# --------------------------------------------------------------------------
# Prediction and matching


def predict_pose(prev: Pose, prev_prev: Pose) -> Pose:
    """Constant-velocity prediction: reapply the last inter-frame motion."""
    return compose(prev, compose(invert(prev_prev), prev))


def usable_features(frame: FrameObservation, mask: OcclusionMask) -> np.ndarray:
    """Indices of features outside the mask."""
    px = frame.features.pixels
    return np.nonzero(~mask.is_masked(px[:, 0], px[:, 1]))[0]


def match_map_points(
    landmarks: LandmarkMap,
    frame: FrameObservation,
    predicted: Pose,
    mask: OcclusionMask,
    cfg: TrackingConfig = TrackingConfig(),
    window: float | None = None,
) -> Matches:
    """Project map points with the predicted camera pose and match them to unmasked features."""
    K = frame.intrinsics
    if (mask.width, mask.height) != (K.width, K.height):
        raise ValueError("mask size does not match the frame")
    window = cfg.match_window if window is None else window
    feats = frame.features
    cand = usable_features(frame, mask)
    empty = Matches(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int8))
    if len(cand) == 0 or len(landmarks) == 0:
        return empty

    T_cw = invert(predicted)
    pc = landmarks.positions @ T_cw.R.T + T_cw.t
    front = pc[:, 2] > 0.1
    z = np.where(front, pc[:, 2], 1.0)
    u = K.fx * pc[:, 0] / z + K.cx
    v = K.fy * pc[:, 1] / z + K.cy
    visible = front & (u >= -window) & (u < K.width + window) & (v >= -window) & (v < K.height + window)
    vis = np.nonzero(visible)[0]
    if len(vis) == 0:
        return empty
    proj = np.column_stack([u[vis], v[vis]])

    fpx = feats.pixels[cand]
    pairs = cKDTree(proj).sparse_distance_matrix(cKDTree(fpx[:, :2]), window, p=np.inf, output_type="ndarray")
    if len(pairs) == 0:
        return empty
    mi = vis[pairs["i"]]
    fi = cand[pairs["j"]]

    # stereo features must also agree on the right-image column
    ur_pred = u[mi] - K.bf / z[mi]
    ur_obs = feats.pixels[fi, 2]
    ok = np.isnan(ur_obs) | (np.abs(ur_pred - ur_obs) <= window)
    mi, fi = mi[ok], fi[ok]

    dist = hamming_distance(landmarks.descriptors[mi], feats.descriptors[fi])
    ok = dist <= cfg.descriptor_max_distance
    mi, fi, dist = mi[ok], fi[ok], dist[ok]
    best = mutual_best(mi, fi, dist)
    mi, fi = mi[best], fi[best]
    order = np.argsort(fi, kind="stable")
    mi, fi = mi[order], fi[order]
    return Matches(mi, fi, landmarks.positions[mi], feats.pixels[fi], feats.scale_levels[fi])


# --------------------------------------------------------------------------
# Motion-only bundle adjustment


def _residuals(T_cw: Pose, m: Matches, K: CameraIntrinsics):
    """Residuals ``obs - pi(R x + t)`` (N, 3), camera points and validity."""
    pc = m.points @ T_cw.R.T + T_cw.t
    valid = pc[:, 2] > 1e-6
    z = np.where(valid, pc[:, 2], 1.0)
    u = K.fx * pc[:, 0] / z + K.cx
    v = K.fy * pc[:, 1] / z + K.cy
    ur = u - K.bf / z
    obs = m.observations
    stereo = ~np.isnan(obs[:, 2])
    r = np.column_stack([obs[:, 0] - u, obs[:, 1] - v, np.where(stereo, obs[:, 2] - ur, 0.0)])
    return r, pc, valid, stereo


def residual_jacobian(T_cw: Pose, m: Matches, K: CameraIntrinsics) -> np.ndarray:
    """d residual / d twist for the left update ``exp(twist) * T_cw``; shape (N, 3, 6)."""
    pc = m.points @ T_cw.R.T + T_cw.t
    X, Y, Z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / Z
    iz2 = iz * iz
    n = len(pc)
    # rows of the projection Jacobian d(u, v, u_r)/d(pc)
    Jpi = np.zeros((n, 3, 3))
    Jpi[:, 0, 0] = K.fx * iz
    Jpi[:, 0, 2] = -K.fx * X * iz2
    Jpi[:, 1, 1] = K.fy * iz
    Jpi[:, 1, 2] = -K.fy * Y * iz2
    Jpi[:, 2, 0] = K.fx * iz
    Jpi[:, 2, 2] = -K.fx * (X - K.baseline) * iz2
    Jpi[np.isnan(m.observations[:, 2]), 2, :] = 0.0
    # d(pc)/d(twist) = [I | -[pc]x]; row times -[pc]x expanded by hand
    p, q, w = Jpi[:, :, 0], Jpi[:, :, 1], Jpi[:, :, 2]
    J = np.empty((n, 3, 6))
    J[:, :, :3] = Jpi
    J[:, :, 3] = w * Y[:, None] - q * Z[:, None]
    J[:, :, 4] = p * Z[:, None] - w * X[:, None]
    J[:, :, 5] = q * X[:, None] - p * Y[:, None]
    return -J


def _information(m: Matches) -> np.ndarray:
    """Inverse variance per residual row: Sigma = (1.2^level)^2 I."""
    return SCALE_FACTOR ** (-2.0 * m.levels.astype(float))


def mahalanobis_errors(T_cw: Pose, m: Matches, K: CameraIntrinsics) -> np.ndarray:
    r, _, valid, _ = _residuals(T_cw, m, K)
    s = np.sum(r * r, axis=1) * _information(m)
    return np.where(valid, s, np.inf)


def _deltas(m: Matches, cfg: TrackingConfig) -> np.ndarray:
    stereo = ~np.isnan(m.observations[:, 2])
    return np.where(stereo, cfg.huber_delta_stereo, cfg.huber_delta_mono)


def _robust_cost(s: np.ndarray, delta: np.ndarray) -> float:
    s = np.minimum(s, 1e12)
    return float(np.sum(np.where(s <= delta**2, s, 2.0 * delta * np.sqrt(s) - delta**2)))


def solve_motion_only_ba(
    matches: Matches, init: Pose, K: CameraIntrinsics, cfg: TrackingConfig = TrackingConfig()
) -> tuple[Pose, int]:
    """Refine a camera-to-world pose from 3D-2D matches; returns ``(pose, inlier_count)``."""
    pose, inliers, _ = _solve(matches, init, K, cfg)
    return pose, inliers


def _solve(matches: Matches, init: Pose, K: CameraIntrinsics, cfg: TrackingConfig):
    if len(matches) < cfg.min_inliers:
        raise InsufficientMatches(f"{len(matches)} matches, need {cfg.min_inliers}")
    delta = _deltas(matches, cfg)
    info = _information(matches)
    T = invert(init)
    s = mahalanobis_errors(T, matches, K)
    cost = _robust_cost(s, delta)
    lam = 1e-6
    rejected = 0
    for _ in range(cfg.max_iterations):
        r, _, valid, _ = _residuals(T, matches, K)
        w = np.where(s <= delta**2, 1.0, delta / np.sqrt(np.maximum(s, delta**2))) * info * valid
        J = residual_jacobian(T, matches, K)
        J[~valid] = 0.0
        sw = np.sqrt(w)
        Jw = (J * sw[:, None, None]).reshape(-1, 6)
        H = Jw.T @ Jw
        g = Jw.T @ (r * sw[:, None]).ravel()
        converged = False
        while True:
            try:
                step = np.linalg.solve(H + lam * np.diag(np.diag(H)), -g)
            except np.linalg.LinAlgError:
                raise SolverDiverged("normal equations are singular") from None
            if np.linalg.norm(step) < 1e-8:
                converged = True
                break
            T_new = compose(pose_exp(step), T)
            s_new = mahalanobis_errors(T_new, matches, K)
            cost_new = _robust_cost(s_new, delta)
            if cost_new <= cost * (1.0 + 1e-12):
                T, s, cost = T_new, s_new, cost_new
                lam = max(lam / 10.0, 1e-12)
                rejected = 0
                break
            rejected += 1
            if rejected >= 5:
                raise SolverDiverged(f"cost rose on {rejected} consecutive damped steps")
            lam = max(lam * 10.0, 1e-6)
        if converged:
            break
    inlier_mask = s < delta**2
    return invert(T), int(np.count_nonzero(inlier_mask)), inlier_mask


def estimate_pose(matches: Matches, init: Pose, K: CameraIntrinsics, cfg: TrackingConfig):
    """Robust solve with outlier rounds: after each solve, only inliers feed the next one.

    Returns ``(pose, inlier_mask)`` over the given matches.
    """
    active = np.ones(len(matches), dtype=bool)
    pose = init
    inlier_mask = active
    for _ in range(cfg.outlier_rounds):
        pose, _, _ = _solve(matches.subset(active), pose, K, cfg)
        s = mahalanobis_errors(invert(pose), matches, K)
        inlier_mask = s < _deltas(matches, cfg) ** 2
        if np.array_equal(inlier_mask, active) or np.count_nonzero(inlier_mask) < cfg.min_inliers:
            break
        active = inlier_mask
    return pose, inlier_mask


# --------------------------------------------------------------------------
# Pipeline


@dataclass(eq=False)
class TrackingResult:
    timestamp: float
    pose: Pose
    round1_pose: Pose
    mask_tier: MaskTier | None
    masked_area_ratio: float
    motion_states: dict[int, MotionState]
    inlier_count: int
    round1_inlier_count: int
    status: TrackingStatus
    mask: OcclusionMask = field(repr=False)
    inlier_features: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, np.int64))
    map_size: int = 0
    keyframe: bool = False
    detection_mar: float = float("nan")  # before static objects were unmasked


@dataclass
class TrackerState:
    landmarks: LandmarkMap = field(default_factory=LandmarkMap)
    history: deque = field(default_factory=lambda: deque(maxlen=64))  # (frame, pose), tracked frames only
    last_good: Pose | None = None
    velocity: Pose = field(default_factory=Pose.identity)
    frames_since_good: int = 0
    tracked_count: int = 0
    keyframe_count: int = 0
    frame_count: int = 0


def build_mask(frame: FrameObservation, cfg: TrackingConfig) -> OcclusionMask:
    K = frame.intrinsics
    if cfg.mask_policy is MaskPolicy.HIERARCHICAL:
        return hierarchical_mask(frame.detections, K.width, K.height, cfg.tau_mar)
    if cfg.mask_policy is MaskPolicy.BBOX:
        return rasterize_bbox_mask(frame.detections, K.width, K.height)
    if cfg.mask_policy is MaskPolicy.PIXELWISE:
        return rasterize_pixelwise_mask(frame.detections, K.width, K.height)
    return OcclusionMask.blank(K.width, K.height)


def _match_and_estimate(state: TrackerState, frame, predicted, mask, cfg):
    """Match with a widened window if needed, then solve. Returns ``(pose, matches, inlier_mask)`` or None."""
    matches = match_map_points(state.landmarks, frame, predicted, mask, cfg)
    if len(matches) < 3 * cfg.min_inliers:
        wide = match_map_points(state.landmarks, frame, predicted, mask, cfg, window=3 * cfg.match_window)
        if len(wide) > len(matches):
            matches = wide
    try:
        pose, inliers = estimate_pose(matches, predicted, frame.intrinsics, cfg)
    except (InsufficientMatches, SolverDiverged):
        return None
    if np.count_nonzero(inliers) < cfg.min_inliers:
        return None
    return pose, matches, inliers


def update_map(state: TrackerState, frame: FrameObservation, pose: Pose, mask: OcclusionMask,
               matched_features: np.ndarray, cfg: TrackingConfig = TrackingConfig()) -> int:
    """Keyframe insertion: triangulate unmatched stereo features outside the mask. Returns points added."""
    kf = state.keyframe_count
    stale = state.landmarks.last_seen < kf - cfg.prune_after_keyframes
    if np.any(stale):
        state.landmarks.keep(~stale)
    feats = frame.features
    take = np.zeros(len(feats), dtype=bool)
    take[usable_features(frame, mask)] = True
    take[matched_features] = False
    take &= feats.is_stereo
    idx = np.nonzero(take)[0]
    pts, ok = triangulate_stereo_batch(frame.intrinsics, feats.pixels[idx])
    idx, pts = idx[ok], pts[ok]
    world = pose.apply(pts)
    return state.landmarks.add(world, feats.descriptors[idx], kf, feats.hints[idx])


def _classify(state: TrackerState, frame, round1_pose, cfg) -> dict[int, MotionState]:
    history = list(state.history) + [(frame, round1_pose)]
    ref_frame, ref_pose = select_reference_frame(history, cfg.classifier.ref_lag_n)
    if ref_frame is frame:
        return {d.object_id: MotionState(MotionLabel.UNKNOWN) for d in frame.detections}
    return classify_frame_objects(ref_frame, frame, ref_pose, round1_pose, frame.intrinsics, cfg.classifier)


def track_frame(frame: FrameObservation, state: TrackerState, cfg: TrackingConfig = TrackingConfig()) -> TrackingResult:
    """Process one frame and advance ``state``."""
    K = frame.intrinsics
    mask = build_mask(frame, cfg)
    mar = masked_area_ratio(mask)
    tier = None if cfg.mask_policy is MaskPolicy.NONE else mask.tier
    state.frame_count += 1

    if state.last_good is None:
        # bootstrap: first frame defines the world frame
        pose = Pose.identity()
        added = update_map(state, frame, pose, mask, np.zeros(0, np.int64), cfg)
        state.last_good = pose
        state.history.append((frame, pose))
        state.tracked_count = 1
        state.keyframe_count = 1
        return TrackingResult(frame.timestamp, pose, pose, tier, mar, {}, added, added,
                              TrackingStatus.TRACKED, mask, np.zeros(0, np.int64), len(state.landmarks), True, mar)

    predicted = state.last_good
    for _ in range(state.frames_since_good + 1):
        predicted = compose(predicted, state.velocity)

    first = _match_and_estimate(state, frame, predicted, mask, cfg)
    if first is None:
        state.frames_since_good += 1
        return TrackingResult(frame.timestamp, predicted, predicted, tier, mar, {}, 0, 0,
                              TrackingStatus.LOST, mask, np.zeros(0, np.int64), len(state.landmarks), False, mar)
    round1_pose, matches, inliers = first
    pose, final_mask = round1_pose, mask
    final_matches, final_inliers = matches, inliers
    states: dict[int, MotionState] = {}

    if cfg.refine_static and mask.contributor_ids:
        states = _classify(state, frame, round1_pose, cfg)
        statics = [i for i in mask.contributor_ids if i in states and states[i].is_static]
        if statics:
            refined = unmask_objects(mask, statics, frame.detections)
            second = _match_and_estimate(state, frame, round1_pose, refined, cfg)
            if second is not None:
                pose, final_matches, final_inliers = second
                final_mask = refined

    inlier_features = final_matches.feat_idx[final_inliers]
    inlier_points = final_matches.map_idx[final_inliers]
    state.landmarks.observations[inlier_points] += 1
    state.landmarks.last_seen[inlier_points] = state.keyframe_count

    prev = state.last_good
    state.velocity = compose(invert(prev), pose) if state.frames_since_good == 0 else state.velocity
    state.last_good = pose
    state.frames_since_good = 0
    state.tracked_count += 1
    state.history.append((frame, pose))

    keyframe = state.tracked_count % cfg.keyframe_interval == 0
    if keyframe:
        update_map(state, frame, pose, final_mask, final_matches.feat_idx, cfg)
        state.keyframe_count += 1

    return TrackingResult(
        frame.timestamp, pose, round1_pose, tier, masked_area_ratio(final_mask), states,
        len(inlier_features), int(np.count_nonzero(inliers)), TrackingStatus.TRACKED,
        final_mask, inlier_features, len(state.landmarks), keyframe, mar,
    )


class Tracker:
    """Stateful convenience wrapper around :func:`track_frame`."""

    def __init__(self, cfg: TrackingConfig = TrackingConfig()):
        self.cfg = cfg
        self.state = TrackerState()

    def track(self, frame: FrameObservation) -> TrackingResult:
        return track_frame(frame, self.state, self.cfg)


def with_policy(cfg: TrackingConfig, policy: MaskPolicy, refine: bool) -> TrackingConfig:
    return replace(cfg, mask_policy=policy, refine_static=refine)
