"""Training losses: weighted-DLT pose loss, soft inlier count, keypoint cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import LabelError
from .features import DUSTBIN, KEYPOINT_CHANNELS, FeatureGrid
from .geometry.camera import CameraIntrinsics, DepthMap, Pose
from .matching import SoftCorrespondenceSet

KAPPA = 0.1
TAU = 16.0
ALPHA = 2.0
BETA = 2.0
NORM_EPS = 1e-12


@dataclass(frozen=True)
class DltSystem:
    rows: ad.Tensor  # X, [2N, 12]
    e_tilde: np.ndarray  # unit-norm row-major (R | T / scale)
    row_weights: ad.Tensor  # M' repeated per row pair, [2N]
    scale: float = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    pose: ad.Tensor
    inliers: ad.Tensor
    keypoints: ad.Tensor
    total: ad.Tensor
    kappa: float = KAPPA
    tau: float = TAU
    alpha: float = ALPHA
    beta: float = BETA

    def as_row(self) -> dict[str, float]:
        return {"pose": float(self.pose.data), "inliers": float(self.inliers.data),
                "keypoints": float(self.keypoints.data), "total": float(self.total.data)}


def _col(t: ad.Tensor, k: int) -> ad.Tensor:
    return t[:, k:k + 1]


def normalized_coords(pixels: ad.Tensor, intr: CameraIntrinsics) -> ad.Tensor:
    """C^-1 applied to pixels [N, 2]: ((x - cx) / fx, (y - cy) / fy)."""
    scale = ad.constant(np.broadcast_to([1.0 / intr.fx, 1.0 / intr.fy], pixels.shape))
    shift = ad.constant(np.broadcast_to([intr.cx / intr.fx, intr.cy / intr.fy], pixels.shape))
    return ad.sub(ad.mul(pixels, scale), shift)


def backproject_tensor(pixels: ad.Tensor, depth: ad.Tensor, intr: CameraIntrinsics) -> ad.Tensor:
    """unit(C^-1 [x, y, 1]) * depth for pixels [N, 2] and depth [N]."""
    n = pixels.shape[0]
    ray = ad.concat([normalized_coords(pixels, intr), ad.constant(np.ones((n, 1)))], axis=1)
    norm = ad.sqrt(ad.reduce("sum", ad.mul(ray, ray), axes=1))
    scale = ad.reshape(ad.div(depth, norm), (n, 1))
    return ad.mul(ray, ad.broadcast_to(scale, (n, 3)))


def attach_reference_points(corr: SoftCorrespondenceSet, ref_depth: DepthMap,
                            intrinsics: CameraIntrinsics) -> SoftCorrespondenceSet:
    """Look up reference depth at kp' (bilinear, differentiable in kp') and back-project."""
    h, w = corr.ref_kp.shape[:2]
    n = h * w
    kp = ad.reshape(corr.ref_kp, (n, 2))
    image = np.where(ref_depth.valid, ref_depth.values, 1.0)
    depth = ad.bilinear_sample(image, kp)
    rows, cols = ref_depth.shape
    c = kp.data
    valid = ((c[:, 0] >= 0) & (c[:, 0] <= rows - 1) & (c[:, 1] >= 0) & (c[:, 1] <= cols - 1)
             & ad.bilinear_valid(ref_depth.valid, c))
    points = backproject_tensor(kp, depth, intrinsics)
    return SoftCorrespondenceSet(corr.query_kp, corr.ref_kp, corr.weights,
                                 ad.reshape(points, (h, w, 3)), valid.reshape(h, w))


def _flat(corr: SoftCorrespondenceSet):
    h, w = corr.query_kp.shape[:2]
    n = h * w
    if corr.ref_points is None:
        raise ValueError("correspondences need reference 3D points; see attach_reference_points")
    valid = np.ones(n, bool) if corr.valid is None else corr.valid.reshape(n)
    return (n, ad.reshape(corr.query_kp, (n, 2)), ad.reshape(corr.ref_points, (n, 3)),
            ad.reshape(corr.weights, (n,)), valid)


def build_dlt(corr: SoftCorrespondenceSet, intrinsics: CameraIntrinsics, truth: Pose,
              scale: float | None = None) -> DltSystem:
    """Two DLT rows per correspondence.

    3D points are divided by ``scale`` and the translation of the ground-truth
    pose likewise, so rows are unit-free and the null-space property is kept.
    The scale is treated as a constant; callers should pass one that does not
    depend on trainable parameters (the default, mean range of the valid
    reference points, does).
    """
    n, kp, P, weights, valid = _flat(corr)
    if scale is None:
        pts = P.data[valid]
        scale = float(np.linalg.norm(pts, axis=1).mean()) if len(pts) else 1.0
    P = ad.mul(P, 1.0 / scale)
    uv = normalized_coords(kp, intrinsics)
    u, v = _col(uv, 0), _col(uv, 1)
    ones = ad.constant(np.ones((n, 1)))
    zeros = ad.constant(np.zeros((n, 4)))
    Ph = ad.concat([P, ones], axis=1)  # [N, 4]
    row_u = ad.concat([Ph, zeros, ad.neg(ad.mul(Ph, ad.broadcast_to(u, (n, 4))))], axis=1)
    row_v = ad.concat([zeros, Ph, ad.neg(ad.mul(Ph, ad.broadcast_to(v, (n, 4))))], axis=1)
    rows = ad.reshape(ad.concat([row_u, row_v], axis=1), (2 * n, 12))
    e = np.hstack([truth.R, truth.t[:, None] / scale]).reshape(-1)
    e = e / np.linalg.norm(e)
    masked = ad.mul(weights, ad.constant(valid.astype(np.float64)))
    row_w = ad.reshape(ad.broadcast_to(ad.reshape(masked, (n, 1)), (n, 2)), (2 * n,))
    return DltSystem(rows, e, row_w, scale)


def pose_loss(system: DltSystem, weights: ad.Tensor | None = None) -> ad.Tensor:
    """sum_j M'_j ||X_j e||^2; ``weights`` [N] or [h, w] override the system's."""
    res = ad.einsum("rk,k->r", system.rows, ad.constant(system.e_tilde))
    if weights is None:
        rw = system.row_weights
    else:
        n = system.rows.shape[0] // 2
        wt = ad.reshape(ad.as_tensor(weights), (n, 1))
        rw = ad.reshape(ad.broadcast_to(wt, (n, 2)), (2 * n,))
    return ad.reduce("weighted-sum", ad.mul(res, res), axes=0, weights=rw)


def reproject_tensor(points: ad.Tensor, pose: Pose, intr: CameraIntrinsics,
                     front: np.ndarray) -> ad.Tensor:
    """Project ``R P + T`` [N, 3]; rows outside ``front`` get a dummy unit depth."""
    n = points.shape[0]
    cam = ad.add(ad.einsum("nk,jk->nj", points, ad.constant(pose.R)),
                 ad.constant(np.broadcast_to(pose.t, (n, 3))))
    f = front.astype(np.float64)[:, None]
    z = ad.add(ad.mul(_col(cam, 2), ad.constant(f)), ad.constant(1.0 - f))
    xy = ad.div(cam[:, 0:2], ad.broadcast_to(z, (n, 2)))
    scale = ad.constant(np.broadcast_to([intr.fx, intr.fy], (n, 2)))
    return ad.add(ad.mul(xy, scale), ad.constant(np.broadcast_to([intr.cx, intr.cy], (n, 2))))


def soft_inlier_count(corr: SoftCorrespondenceSet, truth: Pose, intrinsics: CameraIntrinsics,
                      weights: ad.Tensor | None = None, tau: float = TAU) -> ad.Tensor:
    """s = sum M' sigmoid(tau - ||kp - R(kp')||) over correspondences in front of the query."""
    n, kp, P, w_corr, valid = _flat(corr)
    wt = w_corr if weights is None else ad.reshape(ad.as_tensor(weights), (n,))
    z = P.data @ truth.R[2] + truth.t[2]
    front = valid & (z > 0)
    proj = reproject_tensor(P, truth, intrinsics, front)
    diff = ad.sub(kp, proj)
    dist = ad.sqrt(ad.add(ad.reduce("sum", ad.mul(diff, diff), axes=1), NORM_EPS))
    terms = ad.sigmoid(ad.sub(ad.constant(np.full(n, tau)), dist))
    mask = ad.constant(front.astype(np.float64))
    return ad.reduce("sum", ad.mul(ad.mul(terms, wt), mask))


def inlier_loss(corr: SoftCorrespondenceSet, truth: Pose, intrinsics: CameraIntrinsics,
                weights: ad.Tensor | None = None, kappa: float = KAPPA, tau: float = TAU) -> ad.Tensor:
    s = soft_inlier_count(corr, truth, intrinsics, weights, tau)
    return ad.exp(ad.mul(s, -kappa))


def inlier_loss_from_count(s) -> ad.Tensor:
    return ad.exp(ad.mul(ad.as_tensor(s), -KAPPA))


def keypoint_ce_loss(grids: Sequence[FeatureGrid], targets: Sequence[np.ndarray]) -> ad.Tensor:
    """Sum over views of the mean per-cell cross-entropy.

    ``targets[v][i, j]`` is a label in 1..65, label 65 meaning "no keypoint"
    (label ``c`` selects channel ``c - 1``).
    """
    if len(grids) != len(targets):
        raise ValueError("one target map per grid")
    total = None
    for grid, target in zip(grids, targets):
        target = np.asarray(target)
        h, w = grid.cells_h, grid.cells_w
        if target.shape != (h, w):
            raise LabelError(f"target shape {target.shape} does not match grid {h}x{w}")
        if not np.issubdtype(target.dtype, np.integer):
            if not np.all(np.equal(np.mod(target, 1), 0)):
                raise LabelError("targets must be integer labels")
            target = target.astype(np.int64)
        if target.min() < 1 or target.max() > KEYPOINT_CHANNELS:
            raise LabelError(f"labels must lie in [1, {KEYPOINT_CHANNELS}]")
        logp = ad.log_softmax_axis(grid.raw_logits, axis=2)
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        picked = logp[ii, jj, target - 1]
        term = ad.neg(ad.reduce("mean", picked))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else ad.constant(0.0)


def total_loss(pose, inliers, keypoints, alpha: float = ALPHA, beta: float = BETA) -> LossBreakdown:
    pose, inliers, keypoints = ad.as_tensor(pose), ad.as_tensor(inliers), ad.as_tensor(keypoints)
    total = ad.add(ad.add(pose, ad.mul(inliers, alpha)), ad.mul(keypoints, beta))
    return LossBreakdown(pose, inliers, keypoints, total, alpha=alpha, beta=beta)


DUSTBIN_LABEL = DUSTBIN + 1
