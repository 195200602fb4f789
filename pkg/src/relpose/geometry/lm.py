"""Levenberg-Marquardt refinement of a pose on its inlier correspondences."""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import CameraIntrinsics, Pose
from .ransac import as_arrays


def _residuals(R, t, img, world, intr: CameraIntrinsics):
    cam = world @ R.T + t
    z = cam[:, 2]
    if (z <= 0).any():
        return None, cam
    r = np.stack([intr.fx * cam[:, 0] / z + intr.cx - img[:, 0],
                  intr.fy * cam[:, 1] / z + intr.cy - img[:, 1]], axis=1)
    return r, cam


def _jacobian(R, cam, world, intr: CameraIntrinsics) -> np.ndarray:
    # parameters (omega, dt) with R <- exp(omega) R, t <- t + dt
    n = len(cam)
    X, Y, Z = cam[:, 0], cam[:, 1], cam[:, 2]
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = intr.fx / Z
    dproj[:, 0, 2] = -intr.fx * X / Z ** 2
    dproj[:, 1, 1] = intr.fy / Z
    dproj[:, 1, 2] = -intr.fy * Y / Z ** 2
    rx = world @ R.T  # rotated points without translation
    skew = np.zeros((n, 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = -rx[:, 2], rx[:, 1]
    skew[:, 1, 0], skew[:, 1, 2] = rx[:, 2], -rx[:, 0]
    skew[:, 2, 0], skew[:, 2, 1] = -rx[:, 1], rx[:, 0]
    dcam = np.concatenate([-skew, np.broadcast_to(np.eye(3), (n, 3, 3))], axis=2)
    return np.einsum("nij,njk->nik", dproj, dcam).reshape(2 * n, 6)


def reprojection_cost(pose: Pose, inliers, intrinsics: CameraIntrinsics) -> float:
    img, world, _ = as_arrays(inliers)
    r, _ = _residuals(pose.R, pose.t, img, world, intrinsics)
    return np.inf if r is None else float((r ** 2).sum())


def lm_refine(initial: Pose, inliers, intrinsics: CameraIntrinsics, max_iters: int = 50,
              damping: float = 1e-3) -> Pose:
    """Minimize the summed squared reprojection error; never increases it."""
    img, world, _ = as_arrays(inliers)
    R, t = initial.R, initial.t.copy()
    r, cam = _residuals(R, t, img, world, intrinsics)
    if r is None or len(img) < 3:
        return initial
    cost = float((r ** 2).sum())
    mu = damping
    improved = False
    for _ in range(max_iters):
        J = _jacobian(R, cam, world, intrinsics)
        g = J.T @ r.reshape(-1)
        A = J.T @ J
        stop = False
        while True:
            try:
                step = -np.linalg.solve(A + mu * np.diag(np.diag(A) + 1e-12), g)
            except np.linalg.LinAlgError:
                mu *= 10
                if mu > 1e16:
                    stop = True
                    break
                continue
            if np.linalg.norm(step) < 1e-10:
                stop = True
                break
            R_new = Rotation.from_rotvec(step[:3]).as_matrix() @ R
            t_new = t + step[3:]
            r_new, cam_new = _residuals(R_new, t_new, img, world, intrinsics)
            cost_new = np.inf if r_new is None else float((r_new ** 2).sum())
            if cost_new <= cost:
                R, t, r, cam, cost = R_new, t_new, r_new, cam_new, cost_new
                mu = max(mu / 10, 1e-12)
                improved = True
                break
            mu *= 10
            if mu > 1e16:
                stop = True
                break
        if stop:
            break
    return Pose.from_matrix(R, t) if improved else initial
