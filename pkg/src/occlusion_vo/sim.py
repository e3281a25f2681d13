"""Synthetic construction-site stereo sequences with exact ground truth.

The world is a textured ground plane with a distant embankment plus a set of
rigid machines built from boxes. A side-looking stereo camera drives along a
path; every frame lists the stereo features of visible landmarks, detections
(box and silhouette) of the machines in view, and ground-truth motion labels.
All randomness comes from one seeded generator.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .features import DESCRIPTOR_BYTES, FeatureSet, FrameObservation
from .geometry import CameraIntrinsics, Pose, default_intrinsics, rotation_exp
from .masking import BoundingBox, ObjectDetection, PixelRegion
from .motion_state import OCCLUDER_LABEL, MotionLabel

DATASET_VERSION = 1
OCCLUDER_ID = 10_000
OBJECT_HINT_BASE = 1_000_000

CAMERA_HEIGHT = 2.0
CAMERA_PITCH = math.radians(10.0)
LOOP_SIZE = (40.0, 20.0)
LOOP_CORNER_RADIUS = 4.0
# uneven site ground: camera height varies along the path
UNDULATION_AMPLITUDE = 0.15
UNDULATION_WAVELENGTH = 12.0
BOX_MARGIN = 0.05
SILHOUETTE_DILATION = 2
MIN_DETECTION_AREA = 400
_LEVEL_PROBS = np.array([0.4, 0.3, 0.2, 0.1])


class ConfigInvalid(ValueError):
    pass


class CameraPath(str, enum.Enum):
    RECTANGLE_LOOP = "RectangleLoop"
    STRAIGHT_LINE = "StraightLine"
    CUSTOM = "Custom"


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ObjectSpec:
    """A machine placed relative to the camera's first pose.

    ``along`` is measured along the camera's initial heading and ``lateral``
    along its viewing direction (away from the camera). ``speed`` is the
    machine's ground speed in m/s along ``heading`` (radians, relative to the
    camera's initial heading); ``start_frame``/``stop_frame`` bound the
    interval in which it moves.
    """

    kind: str = "roller"
    along: float = 0.0
    lateral: float = 8.0
    heading: float = 0.0
    speed: float = 0.0
    start_frame: int = 0
    stop_frame: int | None = None
    a_priori_dynamic: bool = True


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    frames: int = 100
    fps: float = 6.0
    pixel_noise_sigma: float = 0.5
    descriptor_flip_bits: int = 8
    camera_path: CameraPath = CameraPath.RECTANGLE_LOOP
    intrinsics: CameraIntrinsics = field(default_factory=default_intrinsics)
    target_occlusion: float | None = None
    speed_kmh: float = 4.0
    background_features: int = 700
    object_texture_density: float = 6.0
    objects: tuple[ObjectSpec, ...] = ()
    custom_path: Callable[[float], Pose] | None = field(default=None, compare=False)

    def validate(self) -> None:
        if self.frames < 1:
            raise ConfigInvalid("frames must be >= 1")
        if not self.fps > 0:
            raise ConfigInvalid("fps must be positive")
        if self.pixel_noise_sigma < 0:
            raise ConfigInvalid("pixel_noise_sigma must be >= 0")
        if not 0 <= self.descriptor_flip_bits <= 8 * DESCRIPTOR_BYTES:
            raise ConfigInvalid("descriptor_flip_bits outside [0, 256]")
        if self.target_occlusion is not None and not 0 <= self.target_occlusion < 1:
            raise ConfigInvalid("target_occlusion must lie in [0, 1)")
        if self.speed_kmh < 0:
            raise ConfigInvalid("speed must be >= 0")
        if CameraPath(self.camera_path) is CameraPath.CUSTOM and self.custom_path is None:
            raise ConfigInvalid("Custom camera path needs custom_path")
        if self.background_features < 0 or self.object_texture_density < 0:
            raise ConfigInvalid("densities must be >= 0")


# --------------------------------------------------------------------------
# Machines


# Boxes (x0, x1, y0, y1, z0, z1) in the object frame: x forward, y left, z up.
MACHINE_PARTS: dict[str, tuple[tuple[float, ...], ...]] = {
    "roller": (
        (1.5, 2.75, -1.1, 1.1, 0.0, 1.5),  # drum
        (-2.75, 1.5, -1.0, 1.0, 0.3, 1.6),  # chassis
        (-2.5, -0.5, -0.9, 0.9, 1.6, 3.0),  # cabin
    ),
    "truck": (
        (2.4, 4.0, -1.2, 1.2, 0.5, 3.2),  # cab
        (-4.0, 4.0, -1.1, 1.1, 0.4, 1.2),  # chassis
        (-4.0, 2.2, -1.25, 1.25, 1.2, 3.4),  # dump bed
    ),
    "excavator": (
        (-2.0, 2.0, -1.3, 1.3, 0.0, 1.0),  # tracks
        (-1.8, 1.2, -1.2, 1.2, 1.0, 2.2),  # house
        (0.0, 1.2, 0.2, 1.2, 2.2, 3.1),  # cab
        (1.2, 4.8, -0.3, 0.3, 1.6, 2.4),  # boom
    ),
    "person": ((-0.25, 0.25, -0.25, 0.25, 0.0, 1.75),),
}


@dataclass(frozen=True, eq=False)
class MotionScript:
    """World pose of an object at every frame index."""

    poses: tuple[Pose, ...]

    def __len__(self):
        return len(self.poses)

    def pose(self, k: int) -> Pose:
        return self.poses[k]

    def displacement(self, a: int, b: int) -> float:
        return float(np.linalg.norm(self.poses[a].t - self.poses[b].t)) + float(
            np.linalg.norm(self.poses[a].R - self.poses[b].R)
        )


@dataclass(frozen=True, eq=False)
class RigidObject:
    object_id: int
    class_label: str
    a_priori_dynamic: bool
    body_landmarks: np.ndarray  # (L, 3) object frame
    normals: np.ndarray  # (L, 3) outward face normals
    descriptors: np.ndarray  # (L, 32)
    levels: np.ndarray
    parts: tuple[tuple[float, ...], ...]
    motion: MotionScript

    def corners(self) -> np.ndarray:
        """(P, 8, 3) part corners in the object frame."""
        out = []
        for x0, x1, y0, y1, z0, z1 in self.parts:
            out.append([[x, y, z] for x in (x0, x1) for y in (y0, y1) for z in (z0, z1)])
        return np.array(out, dtype=float)

    def world_landmarks(self, k: int) -> np.ndarray:
        return self.motion.pose(k).apply(self.body_landmarks)

    def is_static_at(self, k: int) -> bool:
        n = len(self.motion)
        if n < 2:
            return True
        j = k - 1 if k > 0 else 1
        return self.motion.displacement(k, j) < 1e-12


@dataclass(frozen=True, eq=False)
class WorldModel:
    landmark_positions: np.ndarray  # (N, 3) static background
    landmark_descriptors: np.ndarray
    landmark_levels: np.ndarray
    objects: tuple[RigidObject, ...]
    camera_poses: tuple[Pose, ...]  # ground truth, camera-to-world
    timestamps: np.ndarray


@dataclass(frozen=True)
class GroundTruthRecord:
    timestamp: float
    pose: Pose
    labels: dict[int, str]  # object id -> Static / Dynamic

    def __eq__(self, other):
        return (
            isinstance(other, GroundTruthRecord)
            and self.timestamp == other.timestamp
            # rotations travel through quaternions on disk
            and self.pose.allclose(other.pose, atol=1e-12)
            and self.labels == other.labels
        )


@dataclass(eq=False)
class SimulatedDataset:
    meta: dict
    frames: list[FrameObservation]
    groundtruth: list[GroundTruthRecord]
    world: WorldModel | None = None

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_dict(self.meta["intrinsics"])

    @property
    def fps(self) -> float:
        return float(self.meta["fps"])

    def equals(self, other: SimulatedDataset) -> bool:
        return (
            self.meta == other.meta
            and len(self.frames) == len(other.frames)
            and all(a.equals(b) for a, b in zip(self.frames, other.frames))
            and self.groundtruth == other.groundtruth
        )


# --------------------------------------------------------------------------
# Camera paths


def _camera_rotation(heading: float) -> np.ndarray:
    """Camera-to-world rotation for a camera looking right of the driving direction, pitched down."""
    h = np.array([math.cos(heading), math.sin(heading), 0.0])
    right = np.array([math.sin(heading), -math.cos(heading), 0.0])
    fwd = math.cos(CAMERA_PITCH) * right + math.sin(CAMERA_PITCH) * np.array([0.0, 0.0, -1.0])
    x = -h
    y = np.cross(fwd, x)
    return np.column_stack([x, y, fwd])


def _loop_point(s: float) -> tuple[np.ndarray, float]:
    """Position and heading at arc length ``s`` on a counter-clockwise rounded rectangle."""
    L, W = LOOP_SIZE
    r = LOOP_CORNER_RADIUS
    sides = (L - 2 * r, W - 2 * r, L - 2 * r, W - 2 * r)
    arc = 0.5 * math.pi * r
    total = sum(sides) + 4 * arc
    s = s % total
    # start of each straight side, heading
    starts = (
        (np.array([-L / 2 + r, -W / 2]), 0.0),
        (np.array([L / 2, -W / 2 + r]), 0.5 * math.pi),
        (np.array([L / 2 - r, W / 2]), math.pi),
        (np.array([-L / 2, W / 2 - r]), 1.5 * math.pi),
    )
    for (p0, hdg), length in zip(starts, sides):
        d = np.array([math.cos(hdg), math.sin(hdg)])
        if s < length:
            return np.array([*(p0 + s * d), CAMERA_HEIGHT]), hdg
        s -= length
        if s < arc:
            centre = p0 + length * d + r * np.array([-d[1], d[0]])
            a = hdg - 0.5 * math.pi + s / r
            pos = centre + r * np.array([math.cos(a), math.sin(a)])
            return np.array([*pos, CAMERA_HEIGHT]), hdg + s / r
        s -= arc
    raise AssertionError("unreachable")


def camera_pose_at(cfg: SimConfig, distance: float) -> Pose:
    path = CameraPath(cfg.camera_path)
    if path is CameraPath.CUSTOM:
        return cfg.custom_path(distance)
    if path is CameraPath.STRAIGHT_LINE:
        pos, hdg = np.array([distance, 0.0, CAMERA_HEIGHT]), 0.0
    else:
        pos, hdg = _loop_point(distance)
    pos = pos + [0.0, 0.0, UNDULATION_AMPLITUDE * math.sin(2 * math.pi * distance / UNDULATION_WAVELENGTH)]
    return Pose(_camera_rotation(hdg), pos)


def camera_trajectory(cfg: SimConfig) -> list[Pose]:
    step = cfg.speed_kmh / 3.6 / cfg.fps
    return [camera_pose_at(cfg, k * step) for k in range(cfg.frames)]


# --------------------------------------------------------------------------
# World construction


def _random_descriptors(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 256, size=(n, DESCRIPTOR_BYTES), dtype=np.uint8)


def _random_levels(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.choice(len(_LEVEL_PROBS), size=n, p=_LEVEL_PROBS).astype(np.int8)


def _background(rng, cfg: SimConfig, K: CameraIntrinsics) -> np.ndarray:
    """Landmarks back-projected from seed views spaced 1 m along the travelled path.

    Samples are thinned by ``z_ref / depth`` so that the landmark density seen
    in the image stays roughly uniform over depth.
    """
    travelled = cfg.speed_kmh / 3.6 / cfg.fps * max(cfg.frames - 1, 0)
    z_ref, z_max, spacing = 4.0, 40.0, 1.0
    # visible landmarks per frame ~ per_seed * (W / fx) * z_ref / spacing
    per_seed = int(math.ceil(cfg.background_features * spacing * K.fx / (K.width * z_ref) / 0.59))
    seeds = np.arange(-40.0, travelled + 40.0 + 1e-9, spacing)
    out = []
    for s in seeds:
        pose = camera_pose_at(cfg, float(s))
        u = rng.uniform(0, K.width, per_seed)
        v = rng.uniform(0, K.height, per_seed)
        rays = np.column_stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones(per_seed)]) @ pose.R.T
        depth = np.full(per_seed, np.inf)
        down = rays[:, 2] < -1e-9
        depth[down] = pose.t[2] / -rays[down, 2]
        # rays missing the near ground end on an embankment 25-40 m away
        far = depth > z_max
        depth[far] = rng.uniform(25.0, z_max, np.count_nonzero(far))
        pts = pose.t + depth[:, None] * rays
        bump = rng.uniform(0.0, 0.15, per_seed)
        pts[~far, 2] = bump[~far]
        keep_prob = np.minimum(1.0, z_ref / depth)
        keep = (rng.uniform(0, 1, per_seed) < keep_prob) & (pts[:, 2] < 8.0) & (pts[:, 2] > -0.5)
        out.append(pts[keep])
    return np.vstack(out) if out else np.zeros((0, 3))


def _face_samples(rng, part, density: float):
    """Random points on the faces of an axis-aligned box, with outward normals."""
    x0, x1, y0, y1, z0, z1 = part
    faces = (
        ((x1, None, None), (1, 0, 0), (y1 - y0) * (z1 - z0)),
        ((x0, None, None), (-1, 0, 0), (y1 - y0) * (z1 - z0)),
        ((None, y1, None), (0, 1, 0), (x1 - x0) * (z1 - z0)),
        ((None, y0, None), (0, -1, 0), (x1 - x0) * (z1 - z0)),
        ((None, None, z1), (0, 0, 1), (x1 - x0) * (y1 - y0)),
    )
    pts, normals = [], []
    for fixed, normal, area in faces:
        n = rng.poisson(density * area)
        p = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), rng.uniform(z0, z1, n)])
        for axis, val in enumerate(fixed):
            if val is not None:
                p[:, axis] = val
        pts.append(p)
        normals.append(np.tile(normal, (n, 1)))
    return np.vstack(pts), np.vstack(normals).astype(float)


def _motion_script(spec: ObjectSpec, cfg: SimConfig, origin: Pose) -> MotionScript:
    # camera's initial heading and viewing direction on the ground plane
    heading_dir = -origin.R[:, 0]
    view = origin.R[:, 2].copy()
    view[2] = 0.0
    view /= np.linalg.norm(view)
    base_yaw = math.atan2(heading_dir[1], heading_dir[0]) + spec.heading
    R = rotation_exp(np.array([0.0, 0.0, base_yaw]))
    start = np.array([origin.t[0], origin.t[1], 0.0]) + spec.along * heading_dir + spec.lateral * view
    direction = R[:, 0]
    stop = cfg.frames if spec.stop_frame is None else spec.stop_frame
    poses = []
    for k in range(cfg.frames):
        moving_frames = min(max(k - spec.start_frame, 0), max(stop - spec.start_frame, 0))
        poses.append(Pose(R, start + spec.speed * moving_frames / cfg.fps * direction))
    return MotionScript(tuple(poses))


def build_world(cfg: SimConfig) -> WorldModel:
    cfg.validate()
    K = cfg.intrinsics
    rng = np.random.default_rng(cfg.seed)
    cams = camera_trajectory(cfg)
    bg = _background(rng, cfg, K)
    bg_desc = _random_descriptors(rng, len(bg))
    bg_levels = _random_levels(rng, len(bg))
    objects = []
    for i, spec in enumerate(cfg.objects):
        if spec.kind not in MACHINE_PARTS:
            raise ConfigInvalid(f"unknown object kind {spec.kind!r}")
        parts = MACHINE_PARTS[spec.kind]
        pts, normals = zip(*(_face_samples(rng, p, cfg.object_texture_density) for p in parts))
        pts, normals = np.vstack(pts), np.vstack(normals)
        objects.append(RigidObject(
            object_id=i + 1, class_label=spec.kind, a_priori_dynamic=spec.a_priori_dynamic,
            body_landmarks=pts, normals=normals, descriptors=_random_descriptors(rng, len(pts)),
            levels=_random_levels(rng, len(pts)), parts=parts,
            motion=_motion_script(spec, cfg, cams[0]),
        ))
    stamps = np.arange(cfg.frames) / cfg.fps
    return WorldModel(bg, bg_desc, bg_levels, tuple(objects), tuple(cams), stamps)


# --------------------------------------------------------------------------
# Rendering


def fill_convex_polygon(poly: np.ndarray, width: int, height: int) -> np.ndarray:
    """Raster of pixels whose centres lie inside a convex polygon (vertices in order)."""
    bits = np.zeros((height, width), dtype=bool)
    ys = poly[:, 1]
    v0 = max(0, int(math.ceil(ys.min() - 0.5)))
    v1 = min(height - 1, int(math.floor(ys.max() - 0.5)))
    if v1 < v0:
        return bits
    yc = np.arange(v0, v1 + 1) + 0.5
    lo = np.full(len(yc), np.inf)
    hi = np.full(len(yc), -np.inf)
    n = len(poly)
    for i in range(n):
        (xa, ya), (xb, yb) = poly[i], poly[(i + 1) % n]
        if ya == yb:
            sel = yc == ya
            lo[sel] = np.minimum(lo[sel], min(xa, xb))
            hi[sel] = np.maximum(hi[sel], max(xa, xb))
            continue
        sel = (yc >= min(ya, yb)) & (yc <= max(ya, yb))
        x = xa + (yc[sel] - ya) * (xb - xa) / (yb - ya)
        lo[sel] = np.minimum(lo[sel], x)
        hi[sel] = np.maximum(hi[sel], x)
    for row, (a, b) in enumerate(zip(lo, hi)):
        if not np.isfinite(a):
            continue
        u0 = max(0, int(math.ceil(a - 0.5)))
        u1 = min(width, int(math.floor(b - 0.5)) + 1)
        if u1 > u0:
            bits[v0 + row, u0:u1] = True
    return bits


def _project(K: CameraIntrinsics, pc: np.ndarray) -> np.ndarray:
    z = pc[:, 2]
    return np.column_stack([K.fx * pc[:, 0] / z + K.cx, K.fy * pc[:, 1] / z + K.cy])


def _silhouette(obj: RigidObject, k: int, T_cw: Pose, K: CameraIntrinsics):
    """Union of projected part hulls, its real-valued image extent and nearest depth."""
    bits = np.zeros((K.height, K.width), dtype=bool)
    corners = obj.corners()
    world = obj.motion.pose(k)
    extent = [np.inf, np.inf, -np.inf, -np.inf]
    near = np.inf
    for part in corners:
        pc = T_cw.apply(world.apply(part))
        front = pc[:, 2] > 0.3
        if np.count_nonzero(front) < 3:
            continue
        uv = _project(K, pc[front])
        try:
            hull = ConvexHull(uv)
        except QhullError:
            continue
        poly = uv[hull.vertices]
        bits |= fill_convex_polygon(poly, K.width, K.height)
        extent = [min(extent[0], uv[:, 0].min()), min(extent[1], uv[:, 1].min()),
                  max(extent[2], uv[:, 0].max()), max(extent[3], uv[:, 1].max())]
        near = min(near, float(pc[front, 2].min()))
    return bits, extent, near


def _dilate(bits: np.ndarray, r: int) -> np.ndarray:
    out = bits.copy()
    for d in range(1, r + 1):
        out[:, d:] |= bits[:, :-d]
        out[:, :-d] |= bits[:, d:]
    rows = out.copy()
    for d in range(1, r + 1):
        out[d:, :] |= rows[:-d, :]
        out[:-d, :] |= rows[d:, :]
    return out


def _flip_bits(rng, desc: np.ndarray, flips: int) -> np.ndarray:
    if flips == 0 or len(desc) == 0:
        return desc.copy()
    n = len(desc)
    bits = np.unpackbits(desc, axis=1)
    # distinct bit positions per row: argsort of random keys
    idx = np.argsort(rng.random((n, bits.shape[1])), axis=1)[:, :flips]
    rows = np.repeat(np.arange(n), flips)
    bits[rows, idx.ravel()] ^= 1
    return np.packbits(bits, axis=1)


def _observe(rng, cfg, K, pc, desc, levels, hints):
    """Noisy stereo features of visible camera-frame points."""
    n = len(pc)
    clean = np.column_stack([_project(K, pc), K.fx * (pc[:, 0] - K.baseline) / pc[:, 2] + K.cx])
    sigma = cfg.pixel_noise_sigma * 1.2 ** levels.astype(float)
    obs = clean + rng.normal(0.0, 1.0, (n, 3)) * sigma[:, None]
    mono = (clean[:, 2] < 0) | (obs[:, 0] - obs[:, 2] <= 0.1)
    obs[mono, 2] = np.nan
    return obs, _flip_bits(rng, desc, cfg.descriptor_flip_bits), levels, hints


def _render_frame(rng, cfg: SimConfig, world: WorldModel, k: int):
    K = cfg.intrinsics
    T_wc = world.camera_poses[k]
    T_cw = T_wc.inverse()
    cam_centre = T_wc.t

    sil = []
    for obj in world.objects:
        bits, extent, near = _silhouette(obj, k, T_cw, K)
        sil.append((obj, bits, extent, near))

    def occluded(uv, depth, skip=None):
        hidden = np.zeros(len(uv), dtype=bool)
        ui = np.clip(uv[:, 0].astype(np.int64), 0, K.width - 1)
        vi = np.clip(uv[:, 1].astype(np.int64), 0, K.height - 1)
        for obj, bits, _, near in sil:
            if obj is skip or not np.isfinite(near):
                continue
            hidden |= bits[vi, ui] & (depth > near)
        return hidden

    def visible(pc):
        front = pc[:, 2] > 0.5
        uv = np.full((len(pc), 2), -1.0)
        uv[front] = _project(K, pc[front])
        inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
        return uv, inside

    chunks = []
    pc = T_cw.apply(world.landmark_positions)
    uv, vis = visible(pc)
    idx = np.nonzero(vis)[0]
    idx = idx[~occluded(uv[idx], pc[idx, 2])]
    chunks.append((pc[idx], world.landmark_descriptors[idx], world.landmark_levels[idx], idx.astype(np.int64)))

    for obj in world.objects:
        pw = obj.world_landmarks(k)
        nw = obj.normals @ obj.motion.pose(k).R.T
        facing = np.einsum("ij,ij->i", nw, cam_centre - pw) > 0
        pc = T_cw.apply(pw)
        uv, vis = visible(pc)
        idx = np.nonzero(vis & facing)[0]
        idx = idx[~occluded(uv[idx], pc[idx, 2], skip=obj)]
        hints = OBJECT_HINT_BASE * obj.object_id + idx
        chunks.append((pc[idx], obj.descriptors[idx], obj.levels[idx], hints.astype(np.int64)))

    pcs = np.vstack([c[0] for c in chunks])
    desc = np.vstack([c[1] for c in chunks])
    levels = np.concatenate([c[2] for c in chunks])
    hints = np.concatenate([c[3] for c in chunks])
    obs, desc, levels, hints = _observe(rng, cfg, K, pcs, desc, levels, hints)
    order = rng.permutation(len(obs))
    features = FeatureSet(obs[order], desc[order], levels[order], hints[order])

    detections = []
    for obj, bits, extent, near in sil:
        if not np.isfinite(near):
            continue
        # a segmenter only sees the part not hidden behind nearer machines
        seen = bits.copy()
        for other, other_bits, _, other_near in sil:
            if other is not obj and other_near < near:
                seen &= ~other_bits
        if np.count_nonzero(seen) < MIN_DETECTION_AREA:
            continue
        if np.array_equal(seen, bits):
            u0, v0, u1, v1 = extent
        else:
            rows, cols = np.nonzero(seen)
            u0, v0, u1, v1 = cols.min(), rows.min(), cols.max() + 1, rows.max() + 1
        mu, mv = BOX_MARGIN * (u1 - u0), BOX_MARGIN * (v1 - v0)
        box = BoundingBox.clipped(u0 - mu, v0 - mv, u1 + mu, v1 + mv, K.width, K.height)
        if box is None:
            continue
        region_bits = _dilate(seen, SILHOUETTE_DILATION)
        inside_box = np.zeros_like(region_bits)
        inside_box[box.v_min:box.v_max, box.u_min:box.u_max] = True
        region = PixelRegion.from_mask(region_bits & inside_box)
        detections.append(ObjectDetection(obj.object_id, obj.class_label, obj.a_priori_dynamic, box, region))

    labels = {
        obj.object_id: (MotionLabel.STATIC if obj.is_static_at(k) else MotionLabel.DYNAMIC).value
        for obj in world.objects
    }
    frame = FrameObservation(float(world.timestamps[k]), features, tuple(detections), K)
    return frame, GroundTruthRecord(float(world.timestamps[k]), T_wc, labels)


def simulate_sequence(world: WorldModel, cfg: SimConfig) -> SimulatedDataset:
    cfg.validate()
    # rendering noise uses its own stream so worlds can be rebuilt independently
    rng = np.random.default_rng([cfg.seed, 1])
    frames, gt = [], []
    for k in range(cfg.frames):
        frame, rec = _render_frame(rng, cfg, world, k)
        frames.append(frame)
        gt.append(rec)
    meta = {
        "version": DATASET_VERSION,
        "intrinsics": cfg.intrinsics.to_dict(),
        "fps": cfg.fps,
        "seed": cfg.seed,
        "frames": cfg.frames,
        "pixel_noise_sigma": cfg.pixel_noise_sigma,
    }
    ds = SimulatedDataset(meta, frames, gt, world)
    if cfg.target_occlusion:
        ds = inject_fixed_occlusion(ds, cfg.target_occlusion)
    return ds


def generate(cfg: SimConfig) -> SimulatedDataset:
    return simulate_sequence(build_world(cfg), cfg)


# --------------------------------------------------------------------------
# Fixed occlusion


def occluder_box(ratio: float, width: int, height: int) -> BoundingBox | None:
    """Centred rectangle covering ``ratio`` of the image with roughly the image's aspect."""
    if not 0 <= ratio < 1:
        raise ValueError("ratio must lie in [0, 1)")
    area = int(round(ratio * width * height))
    if area == 0:
        return None
    ideal_h = height * math.sqrt(ratio)
    best = None
    for h in range(max(1, int(ideal_h * 0.9)), min(height, int(ideal_h * 1.1) + 1) + 1):
        if area % h == 0 and area // h <= width:
            # prefer boxes that sit exactly on the image centre
            key = ((height - h) % 2 + (width - area // h) % 2, abs(h - ideal_h))
            if best is None or key < best[0]:
                best = (key, h, area // h)
    if best is None:
        h = max(1, min(height, int(round(ideal_h))))
        w = max(1, min(width, int(round(area / h))))
    else:
        _, h, w = best
    u0 = (width - w) // 2
    v0 = (height - h) // 2
    return BoundingBox(u0, v0, u0 + w, v0 + h)


def inject_fixed_occlusion(dataset: SimulatedDataset, ratio: float) -> SimulatedDataset:
    """Add one centred, a-priori-dynamic box without silhouette to every frame."""
    K = dataset.intrinsics
    box = occluder_box(ratio, K.width, K.height)
    if box is None:
        return dataset
    det = ObjectDetection(OCCLUDER_ID, OCCLUDER_LABEL, True, box, None)
    frames = [replace(f, detections=f.detections + (det,)) for f in dataset.frames]
    meta = dict(dataset.meta, occlusion_ratio=ratio)
    return SimulatedDataset(meta, frames, dataset.groundtruth, dataset.world)


# --------------------------------------------------------------------------
# Scenarios


def _scenario_objects(name: str, speed: float) -> tuple[ObjectSpec, ...]:
    """Machine layouts; ``speed`` is the camera's ground speed (m/s)."""
    if name == "static":
        return ()
    if name == "parked":
        # one large machine standing beside the path
        return (ObjectSpec("truck", along=6.0, lateral=5.0, speed=0.0),)
    if name == "pair":
        # one roller working, one parked
        return (
            ObjectSpec("roller", along=2.0, lateral=9.0, speed=speed * 1.3),
            ObjectSpec("roller", along=10.0, lateral=8.0, speed=0.0),
        )
    if name == "crowded":
        # machines travelling alongside the camera, filling most of the view
        return (
            ObjectSpec("truck", along=0.0, lateral=6.0, speed=speed),
            ObjectSpec("roller", along=-5.5, lateral=7.5, speed=speed * 1.05),
            ObjectSpec("roller", along=5.5, lateral=8.0, speed=speed * 0.95),
        )
    if name == "large_occlusion":
        # an excavator overtakes close to the camera, briefly covering most of the frame
        return (
            ObjectSpec("excavator", along=-9.0, lateral=5.0, speed=speed * 1.6),
            ObjectSpec("roller", along=4.0, lateral=10.0, speed=0.0),
        )
    if name == "mixed":
        return (
            ObjectSpec("roller", along=-2.0, lateral=8.0, speed=speed * 1.5),
            ObjectSpec("roller", along=6.0, lateral=9.0, speed=0.0),
            ObjectSpec("truck", along=12.0, lateral=10.0, speed=0.0),
            ObjectSpec("excavator", along=3.0, lateral=12.0, speed=speed * 0.8, heading=math.pi),
            ObjectSpec("roller", along=16.0, lateral=8.5, speed=speed * 1.2, heading=math.pi),
        )
    raise ConfigInvalid(f"unknown scenario {name!r}")


SCENARIOS = ("static", "parked", "pair", "crowded", "large_occlusion", "mixed")


def scenario_config(name: str, **overrides) -> SimConfig:
    base = SimConfig(**{k: v for k, v in overrides.items() if k != "objects"})
    speed = base.speed_kmh / 3.6
    return replace(base, objects=_scenario_objects(name, speed)) if "objects" not in overrides else replace(
        base, objects=tuple(overrides["objects"]))
