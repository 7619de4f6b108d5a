import time

import numpy as np
import pytest

from oracles import coordinate_descent_point, grid_search_point, pairwise_midpoint_centroid
from vidrec.camera import CameraIntrinsics, CameraPose, Ray3, qvec_to_rotmat
from vidrec.geometry import Box, iou
from vidrec.synth import SceneSpec, generate, render_box
from vidrec.triangulation import (CORNERS, CalibratedFrame, CornerBundle, InsufficientViews, LargeResidual,
                                  ReplaceMode, SingularBundle, TooFewInliers, TriangulationConfig,
                                  UnregisteredFrame, converge_point, corner_rays, filter_rays, refine_clip,
                                  reproject_box, triangulate_box)

INTR = CameraIntrinsics(100, 100, 100.0, 50.0, 50.0, 0.0)
CFG = TriangulationConfig()


def random_rotation(rng):
    q = rng.normal(size=4)
    return qvec_to_rotmat(q / np.linalg.norm(q))


def rays_through(point, origins):
    point = np.asarray(point, float)
    return [Ray3(o, point - o) for o in origins]


def as_pairs(rays):
    return [(r.origin, r.direction) for r in rays]


def test_converge_exact_intersection():
    p, res = converge_point([Ray3((1, 0, 0), (-1, 0, 0)), Ray3((0, 1, 0), (0, -1, 0))])
    assert np.allclose(p, 0.0, atol=1e-15) and res == 0.0


def test_converge_five_rays_by_construction():
    rng = np.random.default_rng(0)
    p, res = converge_point(rays_through((1, 2, 3), rng.uniform(-10, 10, (5, 3))))
    assert np.abs(p - [1, 2, 3]).max() <= 1e-9
    assert res <= 1e-9


def test_converge_noisy_matches_grid_search():
    rng = np.random.default_rng(1)
    target = np.array([1.0, 2.0, 3.0])
    rays = []
    for o in rng.uniform(-10, 10, (20, 3)):
        d = target - o
        d = d / np.linalg.norm(d) + rng.normal(0, 1e-3, 3)
        rays.append(Ray3(o, d))
    p, res = converge_point(rays)
    g = grid_search_point(as_pairs(rays), target, half=0.5, levels=22)
    assert np.abs(p - g).max() <= 1e-4
    assert res > 0


def test_converge_matches_coordinate_descent_on_random_bundles():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        rays = [Ray3(rng.uniform(-5, 5, 3), rng.normal(size=3)) for _ in range(n)]
        try:
            p, _ = converge_point(rays)
        except SingularBundle:
            continue
        q = coordinate_descent_point(as_pairs(rays), pairwise_midpoint_centroid(as_pairs(rays)))
        worst = max(worst, float(np.abs(p - q).max()))
    assert worst <= 1e-6


def test_parallel_bundle_is_singular():
    rays = [Ray3((x, 0, 0), (0, 0, 1)) for x in range(4)]
    with pytest.raises(SingularBundle):
        converge_point(rays)
    with pytest.raises(SingularBundle):
        converge_point(rays[:1])


def test_residual_zero_iff_common_point():
    rng = np.random.default_rng(3)
    origins = rng.uniform(-5, 5, (6, 3))
    _, res = converge_point(rays_through((0.5, -1, 2), origins))
    assert res <= 1e-12
    rays = rays_through((0.5, -1, 2), origins)
    rays[2] = Ray3(rays[2].origin, rays[2].direction + [0, 0.05, 0])
    _, res = converge_point(rays)
    assert res > 1e-4


def test_converge_rigid_equivariance():
    rng = np.random.default_rng(4)
    for _ in range(50):
        rays = [Ray3(rng.uniform(-5, 5, 3), rng.normal(size=3)) for _ in range(6)]
        p, _ = converge_point(rays)
        R, t = random_rotation(rng), rng.normal(size=3)
        moved = [Ray3(R @ r.origin + t, R @ r.direction) for r in rays]
        q, _ = converge_point(moved)
        assert np.abs(q - (R @ p + t)).max() <= 1e-9


def test_corner_rays_symmetric_about_axis():
    fr = CalibratedFrame(0, CameraPose.identity())
    rays = corner_rays(Box(40.0, 30.0, 60.0, 70.0), fr, INTR)
    d = {c: rays[c].direction for c in CORNERS}
    assert np.allclose(d["TL"] * [-1, 1, 1], d["TR"]) and np.allclose(d["TL"] * [1, -1, 1], d["BL"])
    assert np.allclose(d["TL"] * [-1, -1, 1], d["BR"])
    assert np.allclose(sum(d.values())[:2], 0.0)
    with pytest.raises(UnregisteredFrame):
        corner_rays(Box(0.0, 0.0, 1.0, 1.0), CalibratedFrame(1, None), INTR)


def test_corner_rays_pass_through_true_corners():
    scene = generate(SceneSpec(trajectory={"kind": "orbit", "radius": 1.0, "n_frames": 12}))
    worst = 0.0
    for fr in scene.frames:
        rays = corner_rays(scene.gt[fr.frame_index], fr, scene.intrinsics)
        for k, c in enumerate(CORNERS):
            p = scene.target_corners[fr.frame_index][k]
            w = p - rays[c].origin
            worst = max(worst, float(np.linalg.norm(w - (w @ rays[c].direction) * rays[c].direction)))
    assert worst <= 1e-9


def decoy_bundle():
    rng = np.random.default_rng(5)
    good = rays_through((0, 0, 0), rng.uniform(-10, 10, (10, 3)) + [0, 0, -20])
    bad = rays_through((5, 0, 0), rng.uniform(-10, 10, (2, 3)) + [0, 0, -20])
    return CornerBundle("TL", [(i, r) for i, r in enumerate(good + bad)])


def test_filter_drops_decoy_rays():
    out = filter_rays(decoy_bundle(), CFG)
    assert out.inlier_frames == list(range(10))


def test_filter_all_parallel_too_few():
    b = CornerBundle("TL", [(i, Ray3((i, 0, 0), (0, 0, 1))) for i in range(5)])
    with pytest.raises(TooFewInliers):
        filter_rays(b, CFG)


def test_filter_keeps_minimal_clean_bundle():
    rays = rays_through((1, 1, 1), [(0, 0, -5), (3, 0, -5), (0, 3, -5)])
    b = CornerBundle("BR", [(i, r) for i, r in enumerate(rays)])
    assert filter_rays(b, CFG).inlier_frames == [0, 1, 2]


def test_filter_parallel_keeps_earlier_frame():
    rays = rays_through((0, 0, 0), [(0, 0, -5), (4, 0, -5), (0, 4, -5)])
    dup = Ray3((0.01, 0, -5), rays[0].direction)
    b = CornerBundle("TL", [(0, rays[0]), (1, dup), (2, rays[1]), (3, rays[2])])
    assert filter_rays(b, CFG).inlier_frames == [0, 2, 3]


def test_filter_idempotent():
    rng = np.random.default_rng(6)
    for _ in range(30):
        rays = []
        for i in range(int(rng.integers(4, 14))):
            o = rng.uniform(-5, 5, 3) + [0, 0, -10]
            target = rng.normal(0, 0.05, 3) if rng.random() < 0.7 else rng.uniform(-3, 3, 3)
            rays.append((i, Ray3(o, target - o)))
        try:
            once = filter_rays(CornerBundle("TL", rays), CFG)
        except TooFewInliers:
            continue
        twice = filter_rays(once, CFG)
        assert twice.inlier_frames == once.inlier_frames


def test_noiseless_orbit_recovers_corners_and_boxes():
    scene = generate(SceneSpec(trajectory={"kind": "orbit", "radius": 1.0, "n_frames": 12}))
    tri = triangulate_box(scene.gt, scene.frames, {1: scene.intrinsics})
    assert np.abs(tri.corner_array() - np.array(scene.spec.target_box3d)).max() <= 1e-6
    for fr in scene.frames:
        assert iou(reproject_box(tri.corners, fr, scene.intrinsics), scene.gt[fr.frame_index]) >= 0.99


def test_noisy_orbit_mean_iou():
    spec = SceneSpec(seed=3, trajectory={"kind": "orbit", "radius": 1.0, "n_frames": 20},
                     noise={"pixel_sigma": 1.0, "score_noise": 0.0, "dropout_prob": 0.0})
    scene = generate(spec)
    boxes = {f: max(d, key=lambda bs: bs[1])[0] for f, d in scene.detections.items()}
    tri = triangulate_box(boxes, scene.frames, {1: scene.intrinsics})
    vals = [iou(reproject_box(tri.corners, fr, scene.intrinsics), scene.gt[fr.frame_index]) for fr in scene.frames]
    assert np.mean(vals) >= 0.9


def test_moving_target_fails_whole_box():
    scene = generate(SceneSpec(moving_target=True, trajectory={"kind": "orbit", "radius": 1.0, "n_frames": 12}))
    with pytest.raises((LargeResidual, TooFewInliers, SingularBundle)):
        triangulate_box(scene.gt, scene.frames, {1: scene.intrinsics})


def test_too_few_views():
    scene = generate(SceneSpec())
    two = {f: scene.gt[f] for f in (0, 1)}
    with pytest.raises(InsufficientViews):
        triangulate_box(two, scene.frames, {1: scene.intrinsics})


def test_reproject_behind_camera_absent():
    corners = [np.array([x, y, 10.0]) for y in (-1, 1) for x in (-1, 1)]
    turned = CameraPose.from_rt(np.diag([-1.0, 1.0, -1.0]), np.zeros(3))
    assert reproject_box(corners, CalibratedFrame(0, turned), INTR) is None


def test_reproject_clipped_to_image():
    corners = [np.array([x, y, 10.0]) for y in (-1, 1) for x in (3, 8)]
    box = reproject_box(corners, CalibratedFrame(0, CameraPose.identity()), INTR)
    # u spans 80..130 and v 40..60 before clipping to the 100x100 image
    assert box == Box(80.0, 40.0, 100.0, 60.0)
    far = [np.array([x, y, 10.0]) for y in (-1, 1) for x in (20, 30)]
    assert reproject_box(far, CalibratedFrame(0, CameraPose.identity()), INTR) is None


def distractor_scene(n=12):
    spec = SceneSpec(trajectory={"kind": "orbit", "radius": 1.0, "n_frames": n},
                     distractors=[[[1.0, -0.4, 0.0], [2.0, -0.4, 0.0], [1.0, 0.4, 0.0], [2.0, 0.4, 0.0]]])
    scene = generate(spec)
    decoys = {f: render_box(spec.distractors[0], scene.frames[f].pose, scene.intrinsics) for f in (3, 8)}
    return scene, decoys


def test_refine_always_corrects_decoy_frames():
    scene, decoys = distractor_scene()
    preds = dict(scene.gt)
    preds.update(decoys)
    res = refine_clip(preds, scene.frames, {1: scene.intrinsics}, TriangulationConfig(replace_mode="always"))
    assert not res.failed
    assert set(res.replaced_frames) >= {3, 8}
    for f in scene.gt:
        assert iou(res.boxes[f], scene.gt[f]) >= 0.99


def test_refine_only_absent_and_never():
    scene, _ = distractor_scene()
    preds = dict(scene.gt)
    preds[4] = None
    res = refine_clip(preds, scene.frames, {1: scene.intrinsics})
    assert res.replaced_frames == [4]
    assert iou(res.boxes[4], scene.gt[4]) >= 0.99
    assert all(res.boxes[f] == preds[f] for f in preds if f != 4)

    res = refine_clip(preds, scene.frames, {1: scene.intrinsics}, TriangulationConfig(replace_mode=ReplaceMode.NEVER))
    assert res.boxes == preds and res.replaced_frames == [] and not res.failed
    assert len(res.diagnostics()["corners"]) == 4


def test_refine_unregistered_frame_passes_through():
    scene, _ = distractor_scene()
    frames = list(scene.frames)
    frames[2] = CalibratedFrame(2, None)
    preds = dict(scene.gt)
    preds[2] = None
    res = refine_clip(preds, frames, {1: scene.intrinsics}, TriangulationConfig(replace_mode="always"))
    assert not res.failed and res.boxes[2] is None


def test_refine_failure_passes_through():
    scene = generate(SceneSpec(moving_target=True))
    preds = dict(scene.gt)
    res = refine_clip(preds, scene.frames, {1: scene.intrinsics}, TriangulationConfig(replace_mode="always"))
    assert res.failed and res.boxes == preds and res.error


def test_triangulation_runtime():
    spec = SceneSpec(seed=3, trajectory={"kind": "orbit", "radius": 1.0, "n_frames": 20},
                     noise={"pixel_sigma": 1.0, "score_noise": 0.0, "dropout_prob": 0.0})
    scene = generate(spec)
    t0 = time.perf_counter()
    triangulate_box(scene.gt, scene.frames, {1: scene.intrinsics})
    assert time.perf_counter() - t0 < 1.0


def test_config_invariants():
    with pytest.raises(ValueError):
        TriangulationConfig(parallel_cos_thresh=1.0)
    with pytest.raises(ValueError):
        TriangulationConfig(min_inlier_rays=1)
