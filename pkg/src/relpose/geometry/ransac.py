"""P3P-RANSAC with an adaptive iteration bound."""

from __future__ import annotations

import math

import numpy as np

from ..errors import DegenerateSampleError, NoPoseError
from .camera import CameraIntrinsics, Correspondence2D3D, Pose
from .p3p import bearings, p3p_arrays

SAMPLE_SIZE = 4


def adaptive_iterations(inlier_ratio: float, confidence: float, sample_size: int = SAMPLE_SIZE,
                        max_iters: int = 1_000_000) -> int:
    """round(log(1 - confidence) / log(1 - ratio^s)), clipped to [1, max_iters]."""
    if inlier_ratio <= 0:
        return max_iters
    p = inlier_ratio ** sample_size
    if p >= 1:
        return 1
    n = math.log(1 - confidence) / math.log(1 - p)
    return int(min(max(round(n), 1), max_iters))


def as_arrays(correspondences) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(image_points[N,2], world_points[N,3], weights[N])`` from a list or an array pair."""
    if isinstance(correspondences, tuple) and len(correspondences) in (2, 3) \
            and isinstance(correspondences[0], np.ndarray):
        img = np.asarray(correspondences[0], dtype=np.float64).reshape(-1, 2)
        world = np.asarray(correspondences[1], dtype=np.float64).reshape(-1, 3)
        w = np.ones(len(img)) if len(correspondences) == 2 else np.asarray(correspondences[2], float)
        return img, world, w
    cs = list(correspondences)
    img = np.array([c.image_point for c in cs], dtype=np.float64).reshape(-1, 2)
    world = np.array([c.world_point for c in cs], dtype=np.float64).reshape(-1, 3)
    w = np.array([c.weight for c in cs], dtype=np.float64)
    return img, world, w


def reprojection_residuals(R: np.ndarray, t: np.ndarray, image_points: np.ndarray,
                           world_points: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pixel distance per correspondence; ``inf`` for points behind the camera."""
    cam = world_points @ R.T + t
    z = cam[:, 2]
    front = z > 1e-12
    zs = np.where(front, z, 1.0)
    u = intrinsics.fx * cam[:, 0] / zs + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / zs + intrinsics.cy
    res = np.hypot(u - image_points[:, 0], v - image_points[:, 1])
    return np.where(front, res, np.inf)


def ransac_pose(correspondences, intrinsics: CameraIntrinsics, inlier_px: float = 8.0,
                confidence: float = 0.999, max_iters: int = 1000,
                seed: int = 0) -> tuple[Pose, np.ndarray]:
    """Pose with the most inliers (ties broken by residual sum) and its inlier mask."""
    img, world, _ = as_arrays(correspondences)
    n = len(img)
    if n < SAMPLE_SIZE:
        raise NoPoseError(f"need at least {SAMPLE_SIZE} correspondences, got {n}")
    rng = np.random.default_rng(seed)
    rays = bearings(img, intrinsics)

    best = None
    best_count, best_cost = 0, np.inf
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, SAMPLE_SIZE, replace=False)
        try:
            cands = p3p_arrays(rays[idx[:3]], world[idx[:3]])
        except DegenerateSampleError:
            continue
        check = idx[3:]
        chosen, chosen_err = None, np.inf
        for R, t in cands:
            err = reprojection_residuals(R, t, img[check], world[check], intrinsics).max()
            if err < chosen_err:
                chosen, chosen_err = (R, t), err
        if chosen is None or chosen_err > inlier_px:
            continue
        res = reprojection_residuals(*chosen, img, world, intrinsics)
        mask = res <= inlier_px
        count = int(mask.sum())
        cost = float(res[mask].sum())
        if count > best_count or (count == best_count and cost < best_cost):
            best, best_count, best_cost = (chosen, mask), count, cost
            needed = adaptive_iterations(count / n, confidence, SAMPLE_SIZE, max_iters)
    if best is None or best_count < SAMPLE_SIZE:
        raise NoPoseError("no model with at least 4 inliers")
    (R, t), mask = best
    return Pose.from_matrix(R, t), mask


__all__ = ["adaptive_iterations", "ransac_pose", "reprojection_residuals", "as_arrays",
           "Correspondence2D3D"]
