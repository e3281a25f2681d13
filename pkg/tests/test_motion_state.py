import numpy as np
import pytest

from occlusion_vo.features import DESCRIPTOR_BYTES, FeatureSet, FrameObservation
from occlusion_vo.geometry import Pose, default_intrinsics, project_stereo_batch
from occlusion_vo.masking import BoundingBox, ObjectDetection
from occlusion_vo.motion_state import (
    OCCLUDER_LABEL,
    ClassifierParams,
    EmptyHistory,
    MotionLabel,
    MotionState,
    associate_objects,
    classify,
    classify_frame_objects,
    default_ref_lag,
    kept_errors,
    monte_carlo_sigma_bkg,
    object_point_errors,
    ref_lag_range,
    select_reference_frame,
    static_ids,
)
from occlusion_vo.sim import generate, scenario_config
from oracles import kept_by_hand

K = default_intrinsics()


def cloud(rng, centre, n=40, size=1.0):
    return np.asarray(centre) + rng.uniform(-size, size, (n, 3))


def frame_from_objects(t, objects, descs, label="roller"):
    """Noise-free frame; ``objects`` maps id -> camera-frame points."""
    pix, desc, dets = [], [], []
    for oid, pts in objects.items():
        uv = project_stereo_batch(K, pts)
        pix.append(uv)
        desc.append(descs[oid])
        lo, hi = np.floor(uv[:, :2].min(0)) - 2, np.ceil(uv[:, :2].max(0)) + 2
        dets.append(ObjectDetection(oid, label, True, BoundingBox(int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1]))))
    pix = np.vstack(pix) if pix else np.zeros((0, 3))
    desc = np.vstack(desc) if desc else np.zeros((0, DESCRIPTOR_BYTES), np.uint8)
    fs = FeatureSet(pix, desc, np.zeros(len(pix), int), np.full(len(pix), -1))
    return FrameObservation(t, fs, tuple(dets), K)


def test_classify_examples():
    s = classify(np.zeros(20))
    assert s.label is MotionLabel.STATIC and s.score == 1.0
    d = classify(np.ones(20))
    assert d.label is MotionLabel.DYNAMIC and d.score == 0.0
    mixed = classify([0.01] * 15 + [10.0] * 5)
    assert mixed.label is MotionLabel.STATIC


def test_classify_unknown_when_too_few_points():
    assert classify(np.zeros(3)).label is MotionLabel.UNKNOWN
    assert classify([]).label is MotionLabel.UNKNOWN
    # 11 distinct errors keep 5 strictly below the median, one short of 6
    assert classify(np.arange(11) * 0.01).label is MotionLabel.UNKNOWN
    assert classify(np.arange(13) * 0.01).label is MotionLabel.STATIC


def test_kept_errors_matches_hand_rule():
    rng = np.random.default_rng(0)
    for n in range(0, 30):
        e = np.round(rng.exponential(0.2, n), 2)
        assert sorted(kept_errors(e).tolist()) == kept_by_hand(e)
    assert len(kept_errors(np.full(7, 0.3))) == 7


def test_classifier_params_validation():
    for bad in (dict(sigma_bkg=0.0), dict(inlier_fraction=1.0), dict(ref_lag_n=0)):
        with pytest.raises(ValueError):
            ClassifierParams(**bad)


def test_reference_frame_selection():
    hist = list(range(10))
    assert select_reference_frame(hist, 3) == 6
    assert select_reference_frame([0, 1], 5) == 0
    with pytest.raises(EmptyHistory):
        select_reference_frame([], 2)
    lo, hi = ref_lag_range(6)
    assert (lo, hi) == (2, 3)
    assert default_ref_lag(6) == 2 and default_ref_lag(1) == 1


def test_association_same_frame_and_disjoint():
    rng = np.random.default_rng(1)
    objs = {1: cloud(rng, [-4, 0, 12]), 2: cloud(rng, [4, 0, 15])}
    descs = {i: rng.integers(0, 256, (40, DESCRIPTOR_BYTES), dtype=np.uint8) for i in objs}
    f = frame_from_objects(0.0, objs, descs)
    assoc = associate_objects(f, f)
    assert [(a.ref_object_id, a.cur_object_id) for a in assoc] == [(1, 1), (2, 2)]
    assert all(len(a.pairs) == 40 for a in assoc)

    other = {3: cloud(rng, [0, 0, 10])}
    g = frame_from_objects(1.0, other, {3: rng.integers(0, 256, (40, DESCRIPTOR_BYTES), dtype=np.uint8)})
    assert associate_objects(f, g) == []


def test_object_point_errors_static_and_translated():
    rng = np.random.default_rng(2)
    pts = cloud(rng, [0, 0, 10])
    descs = {1: rng.integers(0, 256, (40, DESCRIPTOR_BYTES), dtype=np.uint8)}
    ref = frame_from_objects(0.0, {1: pts}, descs)
    same = frame_from_objects(1.0, {1: pts}, descs)
    moved = frame_from_objects(1.0, {1: pts + [1.0, 0, 0]}, descs)
    a = associate_objects(ref, same)[0]
    np.testing.assert_allclose(object_point_errors(a, Pose.identity(), Pose.identity(), K), 0.0, atol=1e-9)
    b = associate_objects(ref, moved)[0]
    np.testing.assert_allclose(object_point_errors(b, Pose.identity(), Pose.identity(), K), 1.0, atol=1e-9)


def test_moving_camera_static_object_has_zero_error():
    rng = np.random.default_rng(3)
    world = cloud(rng, [0, 0, 12])
    descs = {1: rng.integers(0, 256, (40, DESCRIPTOR_BYTES), dtype=np.uint8)}
    cam2 = Pose(np.eye(3), [0.5, 0.0, 0.3])  # camera-to-world
    ref = frame_from_objects(0.0, {1: world}, descs)
    cur = frame_from_objects(1.0, {1: cam2.inverse().apply(world)}, descs)
    states = classify_frame_objects(ref, cur, Pose.identity(), cam2, K)
    assert states[1].label is MotionLabel.STATIC
    # wrong pose makes it look like it moved
    states = classify_frame_objects(ref, cur, Pose.identity(), Pose.identity(), K)
    assert states[1].label is MotionLabel.DYNAMIC


def test_rigid_motion_soundness_noise_free():
    rng = np.random.default_rng(4)
    params = ClassifierParams()
    for shift in (0.0, 0.37, 0.5, 1.0, 2.0):
        pts = cloud(rng, [rng.uniform(-3, 3), 0, rng.uniform(8, 20)])
        descs = {1: rng.integers(0, 256, (40, DESCRIPTOR_BYTES), dtype=np.uint8)}
        d = rng.normal(size=3)
        d *= shift / np.linalg.norm(d)
        ref = frame_from_objects(0.0, {1: pts}, descs)
        cur = frame_from_objects(1.0, {1: pts + d}, descs)
        label = classify_frame_objects(ref, cur, Pose.identity(), Pose.identity(), K, params)[1].label
        assert label is (MotionLabel.STATIC if shift == 0 else MotionLabel.DYNAMIC)


def test_occluder_and_unassociated_objects_stay_unknown():
    rng = np.random.default_rng(5)
    pts = cloud(rng, [0, 0, 10])
    descs = {1: rng.integers(0, 256, (40, DESCRIPTOR_BYTES), dtype=np.uint8)}
    f = frame_from_objects(0.0, {1: pts}, descs, label=OCCLUDER_LABEL)
    assert classify_frame_objects(f, f, Pose.identity(), Pose.identity(), K) == {1: MotionState(MotionLabel.UNKNOWN)}
    empty = FrameObservation(0.0, FeatureSet.empty(), (), K)
    assert classify_frame_objects(empty, empty, Pose.identity(), Pose.identity(), K) == {}


def test_static_ids_treats_unknown_like_dynamic():
    states = {
        3: MotionState(MotionLabel.STATIC, 1.0),
        1: MotionState(MotionLabel.UNKNOWN),
        2: MotionState(MotionLabel.DYNAMIC, 0.0),
        0: MotionState(MotionLabel.STATIC, 0.9),
    }
    assert static_ids(states) == [0, 3]


def test_monte_carlo_sigma_at_ten_metres():
    # first-order: depth std sqrt(2) z^2 / (f b) sigma_px, and X, Y inherit it through
    # (u - cx) / f and (v - cy) / f averaged over a uniform image; two draws add sqrt(2)
    z, s = 10.0, 0.5
    depth_sd = np.sqrt(2) * z**2 / K.bf * s
    lateral = (K.width**2 / 12) / K.fx**2 + (K.height**2 / 12) / K.fy**2
    pixel_sd = z / K.fx * s
    predicted = np.sqrt(2) * np.sqrt(depth_sd**2 * (1 + lateral) + 2 * pixel_sd**2)
    sigma = monte_carlo_sigma_bkg(K, z, s, samples=20_000)
    assert sigma == pytest.approx(predicted, rel=0.05)


def test_pair_scene_one_moving_one_parked(pair_dataset):
    ds = pair_dataset
    k = 10
    ref, cur = ds.frames[k - 2], ds.frames[k]
    states = classify_frame_objects(ref, cur, ds.groundtruth[k - 2].pose, ds.groundtruth[k].pose, K)
    truth = ds.groundtruth[k].labels
    for oid, s in states.items():
        assert s.label.value == truth[oid]


def test_classification_is_deterministic(mixed_small):
    ds = mixed_small
    a = classify_frame_objects(ds.frames[3], ds.frames[5], ds.groundtruth[3].pose, ds.groundtruth[5].pose, K)
    b = classify_frame_objects(ds.frames[3], ds.frames[5], ds.groundtruth[3].pose, ds.groundtruth[5].pose, K)
    assert a == b


def test_first_frame_reference_of_fresh_scene_is_unknown():
    ds = generate(scenario_config("pair", seed=9, frames=2))
    f = ds.frames[0]
    blank = FrameObservation(f.timestamp, FeatureSet.empty(), f.detections, K)
    states = classify_frame_objects(blank, f, Pose.identity(), Pose.identity(), K)
    assert all(s.label is MotionLabel.UNKNOWN for s in states.values())
