"""Line-delimited JSON dataset files.

A dataset is a directory holding ``meta.jsonl`` (one record), ``frames.jsonl``
and ``groundtruth.jsonl`` (one record per frame each). The record layout is
documented in ``docs/dataset_format.md``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .features import DESCRIPTOR_BYTES, NO_HINT, FeatureSet, FrameObservation
from .geometry import CameraIntrinsics, Pose, quaternion_from_rotation, rotation_from_quaternion
from .masking import BoundingBox, ObjectDetection, PixelRegion
from .sim import DATASET_VERSION, GroundTruthRecord, SimulatedDataset

META_FILE = "meta.jsonl"
FRAMES_FILE = "frames.jsonl"
GROUNDTRUTH_FILE = "groundtruth.jsonl"


class DatasetIOError(OSError):
    pass


class FormatError(ValueError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = str(path)
        self.line = line
        self.reason = reason


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _frame_record(frame: FrameObservation) -> dict:
    f = frame.features
    feats = []
    for (u_l, v_l, u_r), desc, level, hint in zip(f.pixels.tolist(), f.descriptors, f.scale_levels.tolist(), f.hints.tolist()):
        feats.append([u_l, v_l, None if math.isnan(u_r) else u_r, desc.tobytes().hex(), level,
                      None if hint == NO_HINT else hint])
    dets = [
        {
            "id": d.object_id,
            "label": d.class_label,
            "dynamic": d.a_priori_dynamic,
            "bbox": d.bbox.as_list(),
            "rle": None if d.pixel_region is None else d.pixel_region.to_list(),
        }
        for d in frame.detections
    ]
    return {"t": frame.timestamp, "features": feats, "detections": dets}


def pose_to_list(pose: Pose) -> list[float]:
    return [*pose.t.tolist(), *quaternion_from_rotation(pose.R).tolist()]


def pose_from_list(values) -> Pose:
    tx, ty, tz, qx, qy, qz, qw = (float(x) for x in values)
    return Pose(rotation_from_quaternion([qx, qy, qz, qw]), [tx, ty, tz])


def export_dataset(dataset: SimulatedDataset, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / META_FILE).write_text(_dumps(dataset.meta) + "\n")
        with open(path / FRAMES_FILE, "w") as fh:
            for frame in dataset.frames:
                fh.write(_dumps(_frame_record(frame)) + "\n")
        with open(path / GROUNDTRUTH_FILE, "w") as fh:
            for rec in dataset.groundtruth:
                labels = {str(k): v for k, v in sorted(rec.labels.items())}
                fh.write(_dumps({"t": rec.timestamp, "pose": pose_to_list(rec.pose), "labels": labels}) + "\n")
    except OSError as exc:
        raise DatasetIOError(f"cannot write dataset to {path}: {exc}") from exc
    return path


def _read_lines(file: Path):
    try:
        text = file.read_text()
    except OSError as exc:
        raise DatasetIOError(f"cannot read {file}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            yield n, json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(file, n, f"malformed JSON ({exc.msg})") from None


def _parse_features(raw, file, n) -> FeatureSet:
    if not isinstance(raw, list):
        raise FormatError(file, n, "features must be a list")
    if not raw:
        return FeatureSet.empty()
    try:
        pixels = np.array([[r[0], r[1], np.nan if r[2] is None else r[2]] for r in raw], dtype=float)
        hexes = "".join(r[3] for r in raw)
        levels = [int(r[4]) for r in raw]
        hints = [NO_HINT if r[5] is None else int(r[5]) for r in raw]
        if any(len(r) != 6 or len(r[3]) != 2 * DESCRIPTOR_BYTES for r in raw):
            raise ValueError("feature records need 6 fields and a 64-hex-char descriptor")
        desc = np.frombuffer(bytes.fromhex(hexes), dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        return FeatureSet(pixels, desc, levels, hints)
    except (TypeError, ValueError, IndexError) as exc:
        raise FormatError(file, n, f"bad feature record: {exc}") from None


def _parse_detection(raw, file, n) -> ObjectDetection:
    try:
        region = None if raw["rle"] is None else PixelRegion.from_list(raw["rle"])
        return ObjectDetection(int(raw["id"]), str(raw["label"]), bool(raw["dynamic"]),
                               BoundingBox(*(int(x) for x in raw["bbox"])), region)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(file, n, f"bad detection record: {exc!r}") from None


def import_dataset(path: str | Path) -> SimulatedDataset:
    path = Path(path)
    if not path.is_dir():
        raise DatasetIOError(f"{path} is not a dataset directory")
    meta_lines = list(_read_lines(path / META_FILE))
    if len(meta_lines) != 1:
        raise FormatError(path / META_FILE, 1, "expected exactly one meta record")
    meta = meta_lines[0][1]
    if meta.get("version") != DATASET_VERSION:
        raise FormatError(path / META_FILE, 1, f"unsupported version {meta.get('version')!r}")
    try:
        K = CameraIntrinsics.from_dict(meta["intrinsics"])
        float(meta["fps"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path / META_FILE, 1, f"bad meta record: {exc!r}") from None

    frames = []
    file = path / FRAMES_FILE
    for n, rec in _read_lines(file):
        if not isinstance(rec, dict) or not {"t", "features", "detections"} <= rec.keys():
            raise FormatError(file, n, "frame record needs t, features, detections")
        feats = _parse_features(rec["features"], file, n)
        dets = tuple(_parse_detection(d, file, n) for d in rec["detections"])
        t = float(rec["t"])
        if frames and t <= frames[-1].timestamp:
            raise FormatError(file, n, "timestamps must increase strictly")
        frames.append(FrameObservation(t, feats, dets, K))

    gt = []
    file = path / GROUNDTRUTH_FILE
    for n, rec in _read_lines(file):
        try:
            labels = {int(k): str(v) for k, v in rec["labels"].items()}
            gt.append(GroundTruthRecord(float(rec["t"]), pose_from_list(rec["pose"]), labels))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise FormatError(file, n, f"bad ground-truth record: {exc!r}") from None
    if "frames" in meta and len(frames) != meta["frames"]:
        raise FormatError(path / FRAMES_FILE, len(frames) + 1, f"expected {meta['frames']} frames, found {len(frames)}")
    if gt and len(gt) != len(frames):
        raise FormatError(file, len(gt) + 1, f"{len(gt)} ground-truth records for {len(frames)} frames")
    return SimulatedDataset(meta, frames, gt)
