import numpy as np
import pytest

from vbslam.camera import CameraModel, reprojection_chain
from vbslam.config import CameraConfig, MapperConfig, VisionConfig, WorldConfig
from vbslam.geom import Pose, yaw_quat
from vbslam.mapper import (
    DegenerateGeometry,
    Keyframe,
    MapPoint,
    SlamMap,
    associate_keyframe,
    match_2d2d,
    mp_predict,
    mp_update,
    pair_score,
    process_keyframe,
    sampson_gate,
    score_candidates,
    tolerant_loss,
    triangulate_pair,
)
from vbslam.simworld import World, camera_from_config, observe_frame


def _kf(kf_id, pose, uv, desc=None, octave=None, agent=0, native=True, t=0.0,
        cov_scale=1e-6):
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    k = uv.shape[0]
    if desc is None:
        desc = np.zeros((k, 48), dtype=np.uint8)
    if octave is None:
        octave = np.zeros(k, dtype=np.uint8)
    return Keyframe(
        kf_id=kf_id, agent=agent, t=t, uv=uv, octave=octave, desc=desc,
        pose=pose, cov6=np.eye(6) * cov_scale, native=native,
    )


def test_tolerant_loss_zero_at_center():
    for a, b, c in [(0.0076, 0.0012, 0.1745), (0.1218, 0.0076, 0.0)]:
        assert tolerant_loss(c, a, b, c) == pytest.approx(0.0, abs=1e-15)


def test_tolerant_loss_monotone_beyond_deadzone():
    a, b, c = (np.radians(5) ** 2, np.radians(2) ** 2, np.radians(10))
    xs = np.linspace(c, c + np.radians(40), 200)
    vals = tolerant_loss(xs, a, b, c)
    assert np.all(np.diff(vals) >= -1e-12)
    assert vals[-1] > vals[0] + 0.01
    # Inside the dead zone the penalty stays near zero.
    assert tolerant_loss(c + np.radians(2), a, b, c) < 1e-3


def test_score_prefers_non_native():
    cam = CameraModel(T_CS=Pose())
    cfg = MapperConfig()
    target = _kf(1, Pose(p=np.array([0.0, 0.0, 0.0])), [[376, 240]])
    twin_pose = Pose(p=np.array([3.0, 0.0, 0.0]))
    native = _kf(2, twin_pose, [[376, 240]], native=True)
    foreign = _kf(3, twin_pose, [[376, 240]], native=False, agent=1)
    s_native = pair_score(target, native, cam, 20.0, cfg)
    s_foreign = pair_score(target, foreign, cam, 20.0, cfg)
    assert s_foreign < s_native


def test_score_candidates_orders_by_score():
    cam = CameraModel(T_CS=Pose())
    cfg = MapperConfig()
    smap = SlamMap(agent=0)
    target = _kf(10, Pose(p=np.zeros(3)), [[376, 240]])
    smap.add_keyframe(target)
    # Wide baseline (good angle) vs nearly coincident (bad angle).
    smap.add_keyframe(_kf(11, Pose(p=np.array([3.5, 0.0, 0.0])), [[376, 240]]))
    smap.add_keyframe(_kf(12, Pose(p=np.array([0.02, 0.0, 0.0])), [[376, 240]]))
    ranked = score_candidates(smap, target, cam, 20.0, cfg)
    assert ranked[0][1] == 11
    assert ranked[0][0] < ranked[1][0]


def test_triangulate_exact_known_point():
    cam = CameraModel(T_CS=Pose())
    cfg = MapperConfig()
    kf_i = _kf(1, Pose(p=np.array([-0.5, 0.0, 0.0])), [[396.0, 240.0]])
    kf_j = _kf(2, Pose(p=np.array([0.5, 0.0, 0.0])), [[356.0, 240.0]])
    out = triangulate_pair(kf_i, kf_j, np.array([0]), np.array([0]), cam, cfg, 0.5)
    assert len(out) == 1
    _, _, pos, cov = out[0]
    np.testing.assert_allclose(pos, [0.0, 0.0, 10.0], atol=1e-9)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_triangulation_covariance_scales_with_pixel_noise():
    cam = CameraModel(T_CS=Pose())
    cfg = MapperConfig()
    kf_i = _kf(1, Pose(p=np.array([-0.5, 0.0, 0.0])), [[396.0, 240.0]],
               cov_scale=1e-12)
    kf_j = _kf(2, Pose(p=np.array([0.5, 0.0, 0.0])), [[356.0, 240.0]],
               cov_scale=1e-12)
    (_, _, _, cov1) = triangulate_pair(kf_i, kf_j, np.array([0]), np.array([0]),
                                       cam, cfg, 0.5)[0]
    (_, _, _, cov2) = triangulate_pair(kf_i, kf_j, np.array([0]), np.array([0]),
                                       cam, cfg, 1.0)[0]
    # Pose-prior contribution is tiny here, so doubling sigma ~ quadruples cov.
    assert np.trace(cov2) / np.trace(cov1) == pytest.approx(4.0, rel=0.05)


def test_triangulate_degenerate_baseline():
    cam = CameraModel(T_CS=Pose())
    cfg = MapperConfig()
    kf_i = _kf(1, Pose(p=np.zeros(3)), [[376.0, 240.0]])
    kf_j = _kf(2, Pose(p=np.array([1e-5, 0.0, 0.0])), [[376.0, 240.0]])
    with pytest.raises(DegenerateGeometry):
        triangulate_pair(kf_i, kf_j, np.array([0]), np.array([0]), cam, cfg, 0.5)


def test_triangulate_parallel_rays_raise():
    cam = CameraModel(T_CS=Pose())
    cfg = MapperConfig()
    # Both cameras look along +z through their principal points: parallel rays.
    kf_i = _kf(1, Pose(p=np.array([-1.0, 0.0, 0.0])), [[376.0, 240.0]])
    kf_j = _kf(2, Pose(p=np.array([1.0, 0.0, 0.0])), [[376.0, 240.0]])
    with pytest.raises(DegenerateGeometry):
        triangulate_pair(kf_i, kf_j, np.array([0]), np.array([0]), cam, cfg, 0.5)


def test_mp_predict_inflates_covariance():
    mp = MapPoint(1, np.zeros(3), np.eye(3) * 0.01, np.zeros(48, dtype=np.uint8))
    mp_predict(mp, 0.2)
    np.testing.assert_allclose(np.diag(mp.cov), 0.05, atol=1e-12)


def _mp_and_kf_for_update(noise=0.0):
    cam = CameraModel(T_CS=Pose())
    truth = np.array([0.3, -0.2, 12.0])
    pose = Pose(p=np.array([0.0, 0.0, 0.0]))
    uv, _, _, _ = reprojection_chain(pose, truth, cam)
    kf = _kf(5, pose, [uv + noise])
    mp = MapPoint(1, truth.copy(), np.eye(3) * 0.25, np.zeros(48, dtype=np.uint8))
    return cam, kf, mp, truth


def test_mp_update_zero_residual_keeps_position():
    cam, kf, mp, truth = _mp_and_kf_for_update()
    tr0 = np.trace(mp.cov)
    mp_update(mp, kf, 0, cam, 0.5)
    np.testing.assert_allclose(mp.position, truth, atol=1e-9)
    assert np.trace(mp.cov) < tr0


def test_mp_update_frozen_after_optimization():
    cam, kf, mp, truth = _mp_and_kf_for_update(noise=3.0)
    mp.optimized_once = True
    tr0 = np.trace(mp.cov)
    mp_update(mp, kf, 0, cam, 0.5)
    np.testing.assert_allclose(mp.position, truth, atol=1e-12)
    assert np.trace(mp.cov) < tr0


def test_mp_update_reduces_error_statistically(rng):
    cam = CameraModel(T_CS=Pose())
    truth = np.array([0.0, 0.0, 15.0])
    errs0, errs1 = [], []
    for trial in range(40):
        start = truth + rng.standard_normal(3) * 0.5
        mp = MapPoint(1, start.copy(), np.eye(3) * 0.25, np.zeros(48, dtype=np.uint8))
        for k in range(6):
            # Observing cameras spread along x/y for parallax.
            pose = Pose(yaw_quat(0.0), np.array([2.0 * np.cos(k), 2.0 * np.sin(k), 0.0]))
            uv, _, _, ok = reprojection_chain(pose, truth, cam)
            assert ok
            kf = _kf(10 + k, pose, [uv + rng.standard_normal(2) * 0.5])
            mp_update(mp, kf, 0, cam, 0.5)
        errs0.append(np.linalg.norm(start - truth))
        errs1.append(np.linalg.norm(mp.position - truth))
    assert np.mean(errs1) < 0.5 * np.mean(errs0)


def test_match_2d2d_mutual_best(rng):
    descs = rng.integers(0, 256, size=(20, 48), dtype=np.uint8)
    kf_a = _kf(1, Pose(), np.zeros((20, 2)), desc=descs.copy())
    perm = rng.permutation(20)
    kf_b = _kf(2, Pose(), np.zeros((20, 2)), desc=descs[perm].copy())
    ia, ib = match_2d2d(kf_a, kf_b, MapperConfig())
    assert ia.size == 20
    np.testing.assert_array_equal(perm[ib], ia)


def test_sampson_gate_flags_inconsistent_pair():
    cam = CameraModel(T_CS=Pose())
    pose_i = Pose(p=np.array([-0.5, 0.0, 0.0]))
    pose_j = Pose(p=np.array([0.5, 0.0, 0.0]))
    pts = np.array([[0.0, 0.0, 10.0], [1.0, 0.5, 8.0], [-1.0, 1.0, 14.0]])
    uv_i = np.array([cam.project(p - pose_i.p) for p in pts])
    uv_j = np.array([cam.project(p - pose_j.p) for p in pts])
    uv_j[2] += np.array([0.0, 25.0])  # epipolar-violating corruption
    kf_i = _kf(1, pose_i, uv_i)
    kf_j = _kf(2, pose_j, uv_j)
    keep = sampson_gate(kf_i, kf_j, np.arange(3), np.arange(3), cam, 2.0)
    assert keep.tolist() == [True, True, False]


def test_process_keyframe_creates_and_associates(rng):
    world = World.generate(WorldConfig(density=0.03, roughness=0.0), seed=3)
    cam = camera_from_config(CameraConfig())
    vcfg = VisionConfig(pixel_noise=0.3, max_keypoints=120)
    mcfg = MapperConfig(budget=60)
    smap = SlamMap(agent=0)

    poses = [
        Pose(yaw_quat(0.0), np.array([0.0, 0.0, 30.0])),
        Pose(yaw_quat(0.0), np.array([4.0, 0.0, 30.0])),
        Pose(yaw_quat(0.0), np.array([8.0, 0.0, 30.0])),
    ]
    kfs = []
    for k, pose in enumerate(poses):
        frame = observe_frame(world, cam, pose, 0.15 * k, rng, vcfg)
        kfs.append(
            Keyframe(
                kf_id=k, agent=0, t=0.15 * k, uv=frame.uv, octave=frame.octave,
                desc=frame.desc, pose=pose, cov6=np.eye(6) * 1e-6, native=(k != 1),
                truth_id=frame.truth_id,
            )
        )

    process_keyframe(smap, kfs[0], cam, mcfg, 0.3, tracker_matches=None)
    stats1 = process_keyframe(smap, kfs[1], cam, mcfg, 0.3, tracker_matches=None)
    assert len(smap.mps) == 0  # non-native target triangulates nothing
    stats2 = process_keyframe(smap, kfs[2], cam, mcfg, 0.3, tracker_matches=None,
                              scene_depth=30.0)
    assert 0 < stats2["created"] <= 60
    # Created points should be near their true landmarks.
    errs = []
    for mp in smap.mps.values():
        ki = mp.obs[2]
        lm = world.positions[kfs[2].truth_id[ki]]
        errs.append(np.linalg.norm(mp.position - lm))
    assert np.median(errs) < 0.5

    # A later keyframe associates against the existing map.
    pose4 = Pose(yaw_quat(0.0), np.array([6.0, 1.0, 30.0]))
    frame4 = observe_frame(world, cam, pose4, 0.45, rng, vcfg)
    kf4 = Keyframe(kf_id=4, agent=1, t=0.45, uv=frame4.uv, octave=frame4.octave,
                   desc=frame4.desc, pose=pose4, cov6=np.eye(6) * 1e-6, native=False)
    stats4 = process_keyframe(smap, kf4, cam, mcfg, 0.3, tracker_matches=None)
    assert stats4["new_obs"] > 10
