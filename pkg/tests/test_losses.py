import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relpose import autodiff as ad
from relpose.errors import LabelError
from relpose.features import normalize_grid
from relpose.geometry import CameraIntrinsics, Pose, backproject, project
from relpose.losses import (DUSTBIN_LABEL, build_dlt, inlier_loss, inlier_loss_from_count, keypoint_ce_loss,
                            pose_loss, soft_inlier_count, total_loss)
from relpose.matching import SoftCorrespondenceSet

INTR = CameraIntrinsics(64.0, 64.0, 32.0, 32.0)


def _corr(rng, truth, h=3, w=3, weights=None, noise=0.0):
    """Reference-camera points and their exact query projections."""
    n = h * w
    ref_px = rng.uniform(4, 60, (n, 2))
    P = backproject(ref_px, rng.uniform(2, 6, n), INTR)
    q = project(truth.apply(P), INTR) + noise * rng.normal(size=(n, 2))
    wts = np.ones(n) if weights is None else weights
    return SoftCorrespondenceSet(ad.constant(q.reshape(h, w, 2)), ad.constant(ref_px.reshape(h, w, 2)),
                                 ad.constant(wts.reshape(h, w)), ad.constant(P.reshape(h, w, 3)))


def _truth(rng):
    return Pose.from_rotvec(rng.uniform(-0.1, 0.1, 3), rng.uniform(-0.3, 0.3, 3))


def test_dlt_null_space(rng):
    truth = _truth(rng)
    sys_ = build_dlt(_corr(rng, truth), INTR, truth)
    assert sys_.rows.shape == (18, 12)
    assert np.abs(sys_.rows.data @ sys_.e_tilde).max() < 1e-9


def test_dlt_single_axis_point():
    corr = SoftCorrespondenceSet(ad.constant([[[32.0, 32.0]]]), ad.constant([[[32.0, 32.0]]]),
                                 ad.constant([[1.0]]), ad.constant([[[0.0, 0.0, 1.0]]]))
    sys_ = build_dlt(corr, INTR, Pose.identity(), scale=1.0)
    # u = v = 0: rows are [P 1 0 0] and [0 P 1 0]
    expect = np.zeros((2, 12))
    expect[0, :4] = [0, 0, 1, 1]
    expect[1, 4:8] = [0, 0, 1, 1]
    np.testing.assert_allclose(sys_.rows.data, expect)
    e = np.hstack([np.eye(3), np.zeros((3, 1))]).ravel() / math.sqrt(3)
    np.testing.assert_allclose(expect @ e, 0)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=9, max_size=9))
def test_pose_loss_zero_for_any_weights(ws):
    rng = np.random.default_rng(0)
    truth = _truth(rng)
    sys_ = build_dlt(_corr(rng, truth, weights=np.array(ws)), INTR, truth)
    assert abs(pose_loss(sys_).item()) < 1e-12 * max(1.0, sum(ws))


def test_pose_loss_zero_weights(rng):
    truth = _truth(rng)
    sys_ = build_dlt(_corr(rng, truth, weights=np.zeros(9), noise=3.0), INTR, truth)
    assert pose_loss(sys_).item() == 0


def test_pose_loss_row_sum_oracle(rng):
    truth = _truth(rng)
    sys_ = build_dlt(_corr(rng, truth, noise=2.0), INTR, truth)
    X, e = sys_.rows.data, sys_.e_tilde
    brute = sum(float(np.dot(X[r], e)) ** 2 for r in range(X.shape[0]))
    assert pose_loss(sys_).item() == pytest.approx(brute, rel=1e-12)


def test_inlier_loss_values(rng):
    truth = _truth(rng)
    assert inlier_loss(_corr(rng, truth, weights=np.zeros(9)), truth, INTR).item() == 1.0
    assert inlier_loss_from_count(0.0).item() == 1.0
    corr = _corr(rng, truth, h=2, w=5)
    s = soft_inlier_count(corr, truth, INTR).item()
    sig16 = 1 / (1 + math.exp(-16))
    assert s == pytest.approx(10 * sig16, abs=1e-9)
    assert inlier_loss(corr, truth, INTR).item() == pytest.approx(math.exp(-0.1 * 10 * sig16), abs=1e-9)
    assert inlier_loss(corr, truth, INTR).item() == pytest.approx(0.36788, abs=1e-5)


def test_residual_at_tau_counts_half():
    P = np.array([[[0.0, 0.0, 4.0]]])
    q = np.array([[[32.0 + 16.0, 32.0]]])
    corr = SoftCorrespondenceSet(ad.constant(q), ad.constant(q), ad.constant([[1.0]]), ad.constant(P))
    assert soft_inlier_count(corr, Pose.identity(), INTR).item() == pytest.approx(0.5, abs=1e-9)


def _grid(logits):
    return normalize_grid(logits, np.ones(logits.shape[:2] + (3,)))


def test_ce_perfect_and_uniform():
    logits = np.full((2, 2, 65), -60.0)
    logits[..., 4] = 60
    target = np.full((2, 2), 5)
    assert keypoint_ce_loss([_grid(logits)], [target]).item() < 1e-30
    u = keypoint_ce_loss([_grid(np.zeros((2, 2, 65)))], [np.full((2, 2), DUSTBIN_LABEL)]).item()
    assert u == pytest.approx(math.log(65), abs=1e-12)


def test_ce_monotone_in_target_logit():
    base = np.zeros((1, 1, 65))
    vals = []
    for v in [0.0, 1.0, 2.0]:
        lg = base.copy()
        lg[0, 0, 7] = v
        vals.append(keypoint_ce_loss([_grid(lg)], [np.array([[8]])]).item())
    assert vals[0] > vals[1] > vals[2]


def test_ce_label_errors():
    g = _grid(np.zeros((2, 2, 65)))
    with pytest.raises(LabelError):
        keypoint_ce_loss([g], [np.zeros((2, 2), int)])
    with pytest.raises(LabelError):
        keypoint_ce_loss([g], [np.full((2, 2), 66)])
    with pytest.raises(LabelError):
        keypoint_ce_loss([g], [np.full((2, 3), 1)])
    with pytest.raises(LabelError):
        keypoint_ce_loss([g], [np.full((2, 2), 1.5)])


def test_total_composition():
    assert total_loss(0.0, 1.0, 0.0).total.item() == 2
    assert total_loss(0.0, 0.0, 0.0).total.item() == 0
    assert total_loss(1.0, 0.5, 0.25).total.item() == 2.5


def test_loss_chain_gradcheck(rng):
    truth = _truth(rng)
    corr = _corr(rng, truth, noise=1.0)
    q = ad.parameter(corr.query_kp.data)
    P = ad.parameter(corr.ref_points.data)
    w = ad.parameter(rng.uniform(0.2, 1.0, (3, 3)))

    def loss():
        c = SoftCorrespondenceSet(q, corr.ref_kp, w, P)
        lp = pose_loss(build_dlt(c, INTR, truth, scale=4.0))
        return total_loss(lp, inlier_loss(c, truth, INTR), 0.0).total

    assert ad.gradcheck(loss, [q, P, w], 45, rng) < 1e-4
