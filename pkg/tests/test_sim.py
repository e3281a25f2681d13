import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from occlusion_vo.geometry import project_stereo_batch, triangulate_stereo_batch
from occlusion_vo.masking import masked_area_ratio, rasterize_bbox_mask
from occlusion_vo.sim import (
    OBJECT_HINT_BASE,
    OCCLUDER_ID,
    SCENARIOS,
    ConfigInvalid,
    ObjectSpec,
    SimConfig,
    build_world,
    fill_convex_polygon,
    generate,
    inject_fixed_occlusion,
    occluder_box,
    scenario_config,
)


def true_camera_points(ds, k):
    """Camera-frame positions of the landmarks behind each feature of frame k."""
    world = ds.world
    hints = ds.frames[k].features.hints
    T_cw = ds.groundtruth[k].pose.inverse()
    pts = np.empty((len(hints), 3))
    bg = hints < OBJECT_HINT_BASE
    pts[bg] = world.landmark_positions[hints[bg]]
    for obj in world.objects:
        sel = hints // OBJECT_HINT_BASE == obj.object_id
        pts[sel] = obj.world_landmarks(k)[hints[sel] % OBJECT_HINT_BASE]
    return T_cw.apply(pts)


def test_same_seed_same_dataset():
    cfg = scenario_config("pair", seed=11, frames=8)
    assert generate(cfg).equals(generate(cfg))
    assert not generate(cfg).equals(generate(scenario_config("pair", seed=12, frames=8)))


@pytest.mark.parametrize("name", SCENARIOS)
def test_every_scenario_builds(name):
    ds = generate(scenario_config(name, seed=0, frames=3))
    assert len(ds.frames) == len(ds.groundtruth) == 3
    assert all(len(f.features) > 100 for f in ds.frames)


def test_object_landmarks_move_rigidly(pair_dataset):
    for obj in pair_dataset.world.objects:
        body = obj.body_landmarks
        d0 = np.linalg.norm(body[:, None] - body[None], axis=-1)
        for k in (0, 7, 29):
            w = obj.world_landmarks(k)
            dk = np.linalg.norm(w[:, None] - w[None], axis=-1)
            assert np.max(np.abs(dk - d0)) < 1e-9


def test_observations_agree_with_ground_truth_within_three_sigma(mixed_small):
    ds = mixed_small
    sigma = ds.meta["pixel_noise_sigma"]
    within, total = 0, 0
    for k, f in enumerate(ds.frames):
        clean = project_stereo_batch(ds.intrinsics, true_camera_points(ds, k))
        s = sigma * 1.2 ** f.features.scale_levels.astype(float)
        err = np.abs(f.features.pixels[:, :2] - clean[:, :2]) / s[:, None]
        within += np.count_nonzero(err < 3)
        total += err.size
    # expected coverage of a +-3 sigma Gaussian interval, less four binomial standard errors
    p = 0.9973
    assert within / total >= p - 4 * np.sqrt(p * (1 - p) / total)


def test_noise_free_triangulation_reproduces_world():
    ds = generate(scenario_config("pair", seed=5, frames=4, pixel_noise_sigma=0.0))
    for k, f in enumerate(ds.frames):
        stereo = f.features.is_stereo
        pts, ok = triangulate_stereo_batch(ds.intrinsics, f.features.pixels[stereo])
        truth = true_camera_points(ds, k)[stereo]
        np.testing.assert_allclose(pts[ok], truth[ok], atol=1e-9)


def test_static_object_is_labelled_static_every_frame():
    spec = ObjectSpec("roller", along=3.0, lateral=8.0, speed=0.0)
    ds = generate(scenario_config("static", seed=1, frames=12, objects=(spec,)))
    assert all(rec.labels == {1: "Static"} for rec in ds.groundtruth)


def test_moving_object_is_labelled_dynamic_while_moving():
    spec = ObjectSpec("roller", along=3.0, lateral=8.0, speed=1.0, start_frame=3, stop_frame=6)
    ds = generate(scenario_config("static", seed=1, frames=10, objects=(spec,)))
    labels = [rec.labels[1] for rec in ds.groundtruth]
    assert labels == ["Static"] * 4 + ["Dynamic"] * 3 + ["Static"] * 3


def test_no_objects_means_background_only():
    ds = generate(scenario_config("static", seed=2, frames=5))
    assert ds.world.objects == ()
    for f, rec in zip(ds.frames, ds.groundtruth):
        assert f.detections == () and rec.labels == {}
        assert np.all(f.features.hints < OBJECT_HINT_BASE)


def test_hidden_landmarks_are_not_observed(pair_dataset):
    # background lying behind a machine never shows through its visible silhouette
    ds = pair_dataset
    K = ds.intrinsics
    objects = {o.object_id: o for o in ds.world.objects}
    checked = 0
    for k, f in enumerate(ds.frames):
        T_cw = ds.groundtruth[k].pose.inverse()
        pc = true_camera_points(ds, k)
        bg = f.features.hints < OBJECT_HINT_BASE
        clean = project_stereo_batch(K, pc)
        for d in f.detections:
            obj = objects[d.object_id]
            far = T_cw.apply(obj.motion.pose(k).apply(obj.corners().reshape(-1, 3)))[:, 2].max()
            behind = bg & (pc[:, 2] > far)
            u, v = clean[behind, 0].astype(int), clean[behind, 1].astype(int)
            # erode past the dilation margin plus a pixel of rasterisation slack
            core = binary_erosion(d.pixel_region.to_mask(K.width, K.height), iterations=4)
            assert not core[v, u].any()
            checked += int(core[v, u].size > 0 and core.any())
    assert checked > 0


def test_detections_have_regions_inside_boxes(mixed_small):
    K = mixed_small.intrinsics
    for f in mixed_small.frames:
        for d in f.detections:
            bits = d.pixel_region.to_mask(K.width, K.height)
            box = np.zeros_like(bits)
            box[d.bbox.v_min:d.bbox.v_max, d.bbox.u_min:d.bbox.u_max] = True
            assert bits.any() and not (bits & ~box).any()


def test_inject_zero_ratio_is_identity(pair_dataset):
    assert inject_fixed_occlusion(pair_dataset, 0.0) is pair_dataset


def test_inject_half_ratio_box():
    ds = generate(scenario_config("static", seed=0, frames=2))
    out = inject_fixed_occlusion(ds, 0.5)
    for f in out.frames:
        occ = [d for d in f.detections if d.object_id == OCCLUDER_ID]
        assert len(occ) == 1
        b = occ[0].bbox
        assert b.area == 259_200
        assert ((b.u_min + b.u_max) / 2, (b.v_min + b.v_max) / 2) == (480, 270)
    # the source dataset is untouched
    assert all(f.detections == () for f in ds.frames)


@pytest.mark.parametrize("ratio", [0.1, 0.3, 0.5, 0.7])
def test_occluder_box_area(ratio):
    b = occluder_box(ratio, 960, 540)
    assert abs(b.area / (960 * 540) - ratio) < 1e-3


def test_half_image_object_gives_half_mar():
    # a detection spanning the left half of the image
    ds = generate(scenario_config("static", seed=0, frames=1))
    out = inject_fixed_occlusion(ds, 0.5)
    m = rasterize_bbox_mask(out.frames[0].detections, 960, 540)
    assert masked_area_ratio(m) == pytest.approx(0.5, abs=1e-3)


def test_target_occlusion_config_injects_box():
    ds = generate(scenario_config("static", seed=0, frames=2, target_occlusion=0.3))
    assert ds.meta["occlusion_ratio"] == 0.3
    assert all(any(d.object_id == OCCLUDER_ID for d in f.detections) for f in ds.frames)


def test_fill_convex_polygon_centres():
    square = np.array([[1.0, 1.0], [4.0, 1.0], [4.0, 3.0], [1.0, 3.0]])
    bits = fill_convex_polygon(square, 6, 5)
    expected = np.zeros((5, 6), bool)
    expected[1:3, 1:4] = True
    assert np.array_equal(bits, expected)


def test_world_is_independent_of_rendering():
    cfg = scenario_config("pair", seed=3, frames=3)
    a, b = build_world(cfg), build_world(cfg)
    np.testing.assert_array_equal(a.landmark_positions, b.landmark_positions)


@pytest.mark.parametrize("bad", [dict(frames=0), dict(fps=0), dict(pixel_noise_sigma=-1),
                                 dict(target_occlusion=1.0), dict(descriptor_flip_bits=300)])
def test_config_validation(bad):
    with pytest.raises(ConfigInvalid):
        SimConfig(**bad).validate()
    with pytest.raises(ConfigInvalid):
        scenario_config("nope")
