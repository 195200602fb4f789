import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relpose.errors import BehindCameraError, DegenerateSampleError, DepthError, FormatError, NoPoseError
from relpose.geometry import (CameraIntrinsics, Correspondence2D3D, DepthMap, Pose, Visibility,
                              adaptive_iterations, backproject, lm_refine, occlusion_check, p3p_solve,
                              pose_error, project, ransac_pose, relative_pose, reproject)
from relpose.geometry.p3p import kabsch

INTR = CameraIntrinsics(64.0, 64.0, 32.0, 32.0)


def random_pose(rng, max_angle=0.4, max_t=1.0):
    return Pose.from_rotvec(rng.uniform(-max_angle, max_angle, 3), rng.uniform(-max_t, max_t, 3))


def homogeneous_project(pose, X, intr):
    # independent 4x4 homogeneous evaluation
    T = np.eye(4)
    T[:3] = pose.matrix
    Xc = (T @ np.append(X, 1.0))[:3]
    u = intr.matrix @ Xc
    return u[:2] / u[2]


def scene_points(rng, pose, n, intr=INTR):
    """World points that project inside a 64x64 image at depth 2..6."""
    px = rng.uniform(2, 62, size=(n, 2))
    d = rng.uniform(2, 6, size=n)
    cam = backproject(px, d, intr)
    return pose.inverse().apply(cam), px


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0, 0)


def test_backproject_principal_point():
    np.testing.assert_allclose(backproject([32.0, 32.0], 3.0, INTR), [0, 0, 3], atol=1e-15)


def test_backproject_hand_value():
    intr = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
    np.testing.assert_allclose(backproject([1.0, 0.0], math.sqrt(2), intr), [1, 0, 1], atol=1e-15)


def test_backproject_rejects_bad_depth():
    with pytest.raises(DepthError):
        backproject([1.0, 1.0], 0.0, INTR)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 63), st.floats(0, 63), st.floats(0.1, 50))
def test_backproject_project_round_trip(x, y, d):
    np.testing.assert_allclose(project(backproject([x, y], d, INTR), INTR), [x, y], atol=1e-9)


def test_reproject_identity_and_axis():
    assert np.allclose(reproject([10.0, 20.0], 4.0, Pose.identity(), INTR), [10, 20], atol=1e-9)
    fwd = Pose.from_rotvec([0, 0, 0], [0, 0, -1.0])
    np.testing.assert_allclose(reproject([32.0, 32.0], 4.0, fwd, INTR), [32, 32], atol=1e-12)


def test_reproject_matches_homogeneous_oracle(rng):
    for _ in range(50):
        pose = random_pose(rng)
        px, d = rng.uniform(0, 64, 2), rng.uniform(2, 6)
        X = backproject(px, d, INTR)
        if pose.apply(X)[2] <= 0:
            continue
        np.testing.assert_allclose(reproject(px, d, pose, INTR), homogeneous_project(pose, X, INTR), atol=1e-9)


def test_reproject_behind_camera():
    flip = Pose.from_rotvec([0, math.pi, 0], [0, 0, 0])
    with pytest.raises(BehindCameraError):
        reproject([32.0, 32.0], 2.0, flip, INTR)


def test_pose_error_cases():
    p = Pose.from_rotvec([0.1, 0.2, 0.3], [1, 2, 3])
    assert pose_error(p, p) == pytest.approx((0, 0), abs=1e-6)
    z180 = Pose.from_rotvec([0, 0, math.pi], [1, 2, 3])
    r, t = pose_error(z180, Pose.from_rotvec([0, 0, 0], [1, 2, 3]))
    assert r == pytest.approx(180) and t == pytest.approx(0)
    q = Pose(np.array([math.cos(math.radians(15)), 0, 0, math.sin(math.radians(15))]), np.zeros(3))
    assert pose_error(q, Pose.identity())[0] == pytest.approx(30, abs=1e-9)


def test_pose_algebra(rng):
    a, b = random_pose(rng), random_pose(rng)
    X = rng.normal(size=(5, 3))
    np.testing.assert_allclose(a.compose(b).apply(X), a.apply(b.apply(X)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().apply(a.apply(X)), X, atol=1e-12)
    rel = relative_pose(a, b)
    np.testing.assert_allclose(rel.compose(b).matrix, a.matrix, atol=1e-12)
    assert a.q[0] >= 0


def test_pose_json_round_trip(rng):
    p = random_pose(rng)
    back = Pose.from_json(p.to_json())
    np.testing.assert_allclose(back.matrix, p.matrix, atol=1e-15)
    with pytest.raises(FormatError):
        Pose.from_dict({"q": [1, 0, 0]})


def test_depth_map_round_trip(tmp_path, rng):
    v = rng.uniform(1, 5, size=(6, 7))
    v[2, 3] = 0
    DepthMap(v).save(tmp_path / "d.dmap")
    back = DepthMap.load(tmp_path / "d.dmap")
    np.testing.assert_array_equal(back.valid, v > 0)
    np.testing.assert_allclose(back.values[back.valid], v[v > 0], rtol=1e-7)


def _planar_depth(z, intr=INTR, shape=(64, 64)):
    px = np.stack(np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij"), -1).astype(float)
    ray = intr.normalize(px)
    return DepthMap(z * np.linalg.norm(ray, axis=-1))


def test_occlusion_visible_occluded_out_of_view():
    far = _planar_depth(4.0)
    assert occlusion_check([32.0, 32.0], 4.0, Pose.identity(), INTR, far) == Visibility.VISIBLE
    near = _planar_depth(2.0)
    assert occlusion_check([32.0, 32.0], 4.0, Pose.identity(), INTR, near) == Visibility.OCCLUDED
    shifted = Pose.from_rotvec([0, 0, 0], [10.0, 0, 0])
    assert occlusion_check([32.0, 32.0], 4.0, shifted, INTR, far) == Visibility.OUT_OF_VIEW


def test_p3p_generate_and_recover(rng):
    for _ in range(100):
        pose = random_pose(rng)
        X, px = scene_points(rng, pose, 3)
        cs = [Correspondence2D3D(p, x) for p, x in zip(px, X)]
        try:
            sols = p3p_solve(*cs, INTR)
        except DegenerateSampleError:
            continue
        best = min(pose_error(s, pose) for s in sols)
        assert best[0] < 1e-6 and best[1] < 1e-6


def test_p3p_collinear():
    X = np.array([[0, 0, 4.0], [1, 0, 4.0], [2, 0, 4.0]])
    cs = [Correspondence2D3D(project(x, INTR), x) for x in X]
    with pytest.raises(DegenerateSampleError):
        p3p_solve(*cs, INTR)


def test_p3p_equilateral_identity():
    ang = np.deg2rad([90, 210, 330])
    X = np.stack([np.cos(ang), np.sin(ang), np.full(3, 5.0)], 1)
    cs = [Correspondence2D3D(project(x, INTR), x) for x in X]
    sols = p3p_solve(*cs, INTR)
    assert min(pose_error(s, Pose.identity())[0] for s in sols) < 1e-6


def test_kabsch_recovers_rotation(rng):
    p = random_pose(rng, 3.0)
    src = rng.normal(size=(6, 3))
    R, t = kabsch(src, p.apply(src))
    np.testing.assert_allclose(R, p.R, atol=1e-10)
    np.testing.assert_allclose(t, p.t, atol=1e-10)


def test_adaptive_iterations():
    assert adaptive_iterations(0.76, 0.999) == 17
    assert adaptive_iterations(0.37, 0.999) == 365
    assert adaptive_iterations(1.0, 0.999) == 1
    assert adaptive_iterations(0.0, 0.999, max_iters=1000) == 1000


def test_ransac_noiseless(rng):
    pose = random_pose(rng)
    X, px = scene_points(rng, pose, 10)
    est, mask = ransac_pose([Correspondence2D3D(p, x) for p, x in zip(px, X)], INTR)
    assert mask.sum() == 10
    assert pose_error(est, pose)[0] < 1e-6


def test_ransac_needs_four():
    X = np.array([[0, 0, 4.0], [1, 0, 4.0], [0, 1, 5.0]])
    with pytest.raises(NoPoseError):
        ransac_pose((project(X, INTR), X), INTR)


def test_ransac_with_outliers_deterministic(rng):
    pose = random_pose(rng)
    X, px = scene_points(rng, pose, 40)
    ang = rng.uniform(0, 2 * np.pi, 20)
    px[:20] += rng.uniform(20, 40, (20, 1)) * np.stack([np.cos(ang), np.sin(ang)], 1)
    a = ransac_pose((px, X), INTR, seed=3)
    b = ransac_pose((px, X), INTR, seed=3)
    np.testing.assert_array_equal(a[0].matrix, b[0].matrix)
    assert not a[1][:20].any() and a[1][20:].all()
    refined = lm_refine(a[0], (px[a[1]], X[a[1]]), INTR)
    r, t = pose_error(refined, pose)
    assert r < 1e-4 and t < 1e-6


def test_lm_stationary_at_truth(rng):
    pose = random_pose(rng)
    X, px = scene_points(rng, pose, 12)
    out = lm_refine(pose, (px, X), INTR)
    assert pose_error(out, pose)[0] < 1e-9


def test_lm_converges_from_perturbation(rng):
    pose = random_pose(rng)
    X, px = scene_points(rng, pose, 12)
    start = Pose.from_rotvec([0, 0, np.deg2rad(2)], [0, 0.05, 0]).compose(pose)
    r, t = pose_error(lm_refine(start, (px, X), INTR), pose)
    assert r < 1e-4 and t < 1e-6


def test_lm_reduces_noisy_residual():
    from relpose.geometry import reprojection_cost
    for seed in range(10):
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        X, px = scene_points(rng, pose, 30)
        noisy = px + rng.normal(0, 0.5, px.shape)
        start = Pose.from_rotvec([0.01, 0, 0], [0, 0.02, 0]).compose(pose)
        before = reprojection_cost(start, (noisy, X), INTR)
        after = reprojection_cost(lm_refine(start, (noisy, X), INTR), (noisy, X), INTR)
        assert after < before
