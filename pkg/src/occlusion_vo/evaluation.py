"""Trajectory alignment, absolute trajectory error, clock sync and ROC analysis."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Pose, quaternion_from_rotation, rotation_from_quaternion
from .motion_state import MotionLabel, kept_errors


class DegenerateGeometry(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class NoOverlap(ValueError):
    pass


class EmptyRecords(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    stamps: np.ndarray
    poses: tuple[Pose, ...]

    def __post_init__(self):
        stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        if len(stamps) != len(self.poses):
            raise LengthMismatch(f"{len(stamps)} stamps for {len(self.poses)} poses")
        if np.any(np.diff(stamps) <= 0):
            raise ValueError("trajectory timestamps must increase strictly")
        object.__setattr__(self, "stamps", stamps)
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def shifted(self, dt: float) -> Trajectory:
        return Trajectory(self.stamps + dt, self.poses)

    def transformed(self, T: Pose, scale: float = 1.0) -> Trajectory:
        """Apply ``x -> s R x + t`` to every camera pose."""
        return Trajectory(self.stamps, tuple(Pose(T.R @ p.R, scale * T.R @ p.t + T.t) for p in self.poses))

    def subset(self, index) -> Trajectory:
        index = np.asarray(index)
        return Trajectory(self.stamps[index], tuple(self.poses[i] for i in index))


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    transform: Pose
    scale: float
    at_rmse: float
    per_pose_errors: np.ndarray


def write_trajectory(traj: Trajectory, path: str | Path) -> None:
    """Plain-text ``timestamp tx ty tz qx qy qz qw`` lines."""
    lines = []
    for t, p in zip(traj.stamps, traj.poses):
        q = quaternion_from_rotation(p.R)
        lines.append(" ".join(repr(float(x)) for x in (t, *p.t, *q)))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_trajectory(path: str | Path) -> Trajectory:
    stamps, poses = [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.replace(",", " ").split()
        if len(vals) != 8:
            raise ValueError(f"{path}:{n}: expected 8 columns, got {len(vals)}")
        t, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in vals)
        stamps.append(t)
        poses.append(Pose(rotation_from_quaternion([qx, qy, qz, qw]), [tx, ty, tz]))
    return Trajectory(np.array(stamps), tuple(poses))


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False):
    """Least-squares ``(R, t, s)`` minimising ``sum ||dst - (s R src + t)||^2``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape:
        raise LengthMismatch(f"{src.shape} vs {dst.shape}")
    n = len(src)
    if n < 3:
        raise DegenerateGeometry(f"need at least 3 positions, got {n}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    spread = np.linalg.svd(xd, compute_uv=False)
    if spread[1] <= 1e-9 * max(spread[0], 1e-300):
        raise DegenerateGeometry("positions are collinear")
    C = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / (np.sum(xs * xs) / n)) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return R, t, s


def at_rmse(est_positions: np.ndarray, gt_positions: np.ndarray) -> float:
    est = np.asarray(est_positions, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt_positions, dtype=float).reshape(-1, 3)
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} reference positions")
    if len(est) == 0:
        raise LengthMismatch("no positions")
    return float(np.sqrt(np.mean(np.sum((est - gt) ** 2, axis=1))))


def umeyama_align(est: Trajectory, gt: Trajectory, with_scale: bool = False) -> AlignmentResult:
    """Align already-associated trajectories (same length, entry by entry)."""
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} vs {len(gt)} poses")
    src, dst = est.positions, gt.positions
    R, t, s = umeyama(src, dst, with_scale)
    aligned = s * src @ R.T + t
    errors = np.linalg.norm(aligned - dst, axis=1)
    return AlignmentResult(Pose(R, t), s, float(np.sqrt(np.mean(errors**2))), errors)


def associate(est_stamps, gt_stamps, max_gap: float, offset: float = 0.0):
    """Nearest-neighbour pairs ``(i_est, i_gt)`` with ``|t_est - (t_gt + offset)| <= max_gap``.

    Each reference stamp is used at most once (the closer estimate wins).
    """
    est_stamps = np.asarray(est_stamps, dtype=float)
    gt_stamps = np.asarray(gt_stamps, dtype=float) + offset
    if len(est_stamps) == 0 or len(gt_stamps) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    j = np.searchsorted(gt_stamps, est_stamps)
    lo = np.clip(j - 1, 0, len(gt_stamps) - 1)
    hi = np.clip(j, 0, len(gt_stamps) - 1)
    pick = np.where(np.abs(gt_stamps[lo] - est_stamps) <= np.abs(gt_stamps[hi] - est_stamps), lo, hi)
    gap = np.abs(gt_stamps[pick] - est_stamps)
    ok = gap <= max_gap + 1e-12
    i_est = np.nonzero(ok)[0]
    i_gt = pick[ok]
    gap = gap[ok]
    # one estimate per reference pose
    order = np.lexsort((i_est, gap, i_gt))
    first = np.ones(len(order), dtype=bool)
    first[1:] = i_gt[order][1:] != i_gt[order][:-1]
    keep = np.sort(order[first])
    return i_est[keep], i_gt[keep]


def _default_gap(est: Trajectory) -> float:
    if len(est) < 2:
        return 0.05
    return 0.5 * float(np.median(np.diff(est.stamps)))


@dataclass(frozen=True, eq=False)
class Evaluation:
    offset: float
    alignment: AlignmentResult
    matched: int
    unmatched: int


def _score(est, gt, offset, max_gap, with_scale):
    i, j = associate(est.stamps, gt.stamps, max_gap, offset)
    if len(i) < 3:
        return None
    try:
        res = umeyama_align(est.subset(i), gt.subset(j), with_scale)
    except DegenerateGeometry:
        return None
    return res, len(i)


def sync_time_offset(
    est: Trajectory,
    gt: Trajectory,
    search_window: float = 3.0,
    step: float = 0.1,
    max_gap: float | None = None,
    with_scale: bool = False,
    min_overlap: float = 0.5,
) -> float:
    """Clock offset to add to the reference stamps that minimises the aligned AT-RMSE.

    Offsets whose association keeps fewer than ``min_overlap`` of the shorter
    trajectory are skipped so a tiny overlap cannot win by accident.
    """
    max_gap = _default_gap(est) if max_gap is None else max_gap
    n_steps = int(round(search_window / step)) if step > 0 else 0
    candidates = sorted((k * step for k in range(-n_steps, n_steps + 1)), key=lambda d: (abs(d), d))
    need = max(3, int(np.ceil(min_overlap * min(len(est), len(gt)))))
    best = None
    for d in candidates:
        scored = _score(est, gt, d, max_gap, with_scale)
        if scored is None or scored[1] < need:
            continue
        rmse = scored[0].at_rmse
        # strict improvement keeps the smaller |offset| on ties
        if best is None or rmse < best[0] - 1e-12:
            best = (rmse, d)
    if best is None:
        raise NoOverlap("no candidate offset leaves enough overlapping poses")
    return float(best[1])


def evaluate(
    est: Trajectory,
    gt: Trajectory,
    with_scale: bool = False,
    sync_window: float = 0.0,
    sync_step: float = 0.1,
    max_gap: float | None = None,
) -> Evaluation:
    """Optional clock sync, association, Umeyama alignment and AT-RMSE."""
    max_gap = _default_gap(est) if max_gap is None else max_gap
    offset = 0.0
    if sync_window > 0:
        offset = sync_time_offset(est, gt, sync_window, sync_step, max_gap, with_scale)
    i, j = associate(est.stamps, gt.stamps, max_gap, offset)
    if len(i) == 0:
        raise NoOverlap("trajectories share no timestamps")
    res = umeyama_align(est.subset(i), gt.subset(j), with_scale)
    return Evaluation(offset, res, len(i), len(est) - len(i))


# --------------------------------------------------------------------------
# ROC


@dataclass(frozen=True)
class ObjectRecord:
    """Per-object, per-frame classification evidence with its ground-truth label."""

    errors: tuple[float, ...]
    truth: MotionLabel


@dataclass(frozen=True, eq=False)
class RocCurve:
    points: list[tuple[float, float, float]]  # (fpr, tpr, sigma_bkg), sorted by fpr
    auc: float


def _static_decisions(kept: list[np.ndarray], sigma: float, inlier_fraction: float) -> np.ndarray:
    out = np.zeros(len(kept), dtype=bool)
    for i, k in enumerate(kept):
        out[i] = np.count_nonzero(k < 3.0 * sigma) / len(k) > inlier_fraction
    return out


def roc_auc(
    records: Sequence[ObjectRecord],
    sigma_values: Sequence[float] | None = None,
    inlier_fraction: float = 0.7,
) -> RocCurve:
    """ROC of the static/dynamic decision over a sweep of ``sigma_bkg``; Static is positive.

    Records with an Unknown ground truth or no usable errors are ignored. The
    curve is anchored at (0, 0) and (1, 1) before trapezoidal integration.
    """
    if sigma_values is None:
        sigma_values = np.linspace(0.0, 0.6, 61)
    usable = [r for r in records if MotionLabel(r.truth) is not MotionLabel.UNKNOWN and len(r.errors)]
    if not usable:
        raise EmptyRecords("no classifiable object records")
    truth = np.array([MotionLabel(r.truth) is MotionLabel.STATIC for r in usable])
    n_pos, n_neg = int(truth.sum()), int((~truth).sum())
    kept = [kept_errors(np.asarray(r.errors)) for r in usable]
    points = []
    for sigma in sigma_values:
        pred = _static_decisions(kept, float(sigma), inlier_fraction)
        tpr = float(np.count_nonzero(pred & truth)) / n_pos if n_pos else 0.0
        fpr = float(np.count_nonzero(pred & ~truth)) / n_neg if n_neg else 0.0
        points.append((fpr, tpr, float(sigma)))
    points.sort(key=lambda p: (p[0], p[1], p[2]))
    xs = np.array([0.0] + [p[0] for p in points] + [1.0])
    ys = np.array([0.0] + [p[1] for p in points] + [1.0])
    auc = float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))
    return RocCurve(points, auc)
