"""Minimal absolute pose from three 2D-3D correspondences.

Grunert's distance formulation reduced to a quartic (Haralick et al. form),
followed by a Newton polish of the three ray lengths and a Kabsch alignment
of the recovered camera-frame triangle onto the world triangle.
"""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateSampleError, EmptySolution
from .camera import CameraIntrinsics, Correspondence2D3D, Pose, project

RESIDUAL_TOL_PX = 1e-6


def bearings(pixels: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    rays = intrinsics.normalize(pixels)
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid ``(R, t)`` minimizing ``sum ||R src_i + t - dst_i||^2``."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    H = (src - ms).T @ (dst - md)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, md - R @ ms


def _polish(s, cos_a, cos_b, cos_g, a2, b2, c2, iters: int = 5):
    for _ in range(iters):
        s1, s2, s3 = s
        F = np.array([s2 * s2 + s3 * s3 - 2 * s2 * s3 * cos_a - a2,
                      s1 * s1 + s3 * s3 - 2 * s1 * s3 * cos_b - b2,
                      s1 * s1 + s2 * s2 - 2 * s1 * s2 * cos_g - c2])
        J = np.array([[0.0, 2 * s2 - 2 * s3 * cos_a, 2 * s3 - 2 * s2 * cos_a],
                      [2 * s1 - 2 * s3 * cos_b, 0.0, 2 * s3 - 2 * s1 * cos_b],
                      [2 * s1 - 2 * s2 * cos_g, 2 * s2 - 2 * s1 * cos_g, 0.0]])
        try:
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            break
        s = s - step
        if np.abs(step).max() < 1e-15 * max(1.0, np.abs(s).max()):
            break
    return s


def p3p_arrays(rays: np.ndarray, world: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """All real ``(R, t)`` with ``R world_i + t`` along unit ``rays_i`` (in front).

    No residual filtering here; see :func:`p3p_solve`.
    """
    P1, P2, P3 = world
    e1, e2 = P2 - P1, P3 - P1
    if np.linalg.norm(np.cross(e1, e2)) <= 1e-9 * np.linalg.norm(e1) * np.linalg.norm(e2):
        raise DegenerateSampleError("world points are collinear")
    j1, j2, j3 = rays
    a2 = float(np.dot(P2 - P3, P2 - P3))
    b2 = float(np.dot(P1 - P3, P1 - P3))
    c2 = float(np.dot(P1 - P2, P1 - P2))
    cos_a, cos_b, cos_g = float(j2 @ j3), float(j1 @ j3), float(j1 @ j2)

    p = (a2 - c2) / b2
    q = (a2 + c2) / b2
    A4 = (p - 1) ** 2 - 4 * c2 / b2 * cos_a ** 2
    A3 = 4 * (p * (1 - p) * cos_b - (1 - q) * cos_a * cos_g + 2 * c2 / b2 * cos_a ** 2 * cos_b)
    A2 = 2 * (p * p - 1 + 2 * p * p * cos_b ** 2 + 2 * (b2 - c2) / b2 * cos_a ** 2
              - 4 * q * cos_a * cos_b * cos_g + 2 * (b2 - a2) / b2 * cos_g ** 2)
    A1 = 4 * (-p * (1 + p) * cos_b + 2 * a2 / b2 * cos_g ** 2 * cos_b - (1 - q) * cos_a * cos_g)
    A0 = (1 + p) ** 2 - 4 * a2 / b2 * cos_g ** 2
    coeffs = np.array([A4, A3, A2, A1, A0])
    if not np.isfinite(coeffs).all() or np.abs(coeffs).max() == 0:
        raise DegenerateSampleError("degenerate quartic")
    roots = np.roots(coeffs)

    out = []
    for v in roots:
        if abs(v.imag) > 1e-3 * (1 + abs(v.real)):
            continue
        v = v.real
        den = 2 * (cos_g - v * cos_a)
        if v <= 0 or abs(den) < 1e-14:
            continue
        u = ((p - 1) * v * v - 2 * p * cos_b * v + 1 + p) / den
        d = 1 + v * v - 2 * v * cos_b
        if u <= 0 or d <= 0:
            continue
        s1 = np.sqrt(b2 / d)
        s = _polish(np.array([s1, u * s1, v * s1]), cos_a, cos_b, cos_g, a2, b2, c2)
        if (s <= 0).any() or not np.isfinite(s).all():
            continue
        R, t = kabsch(world, rays * s[:, None])
        out.append((R, t))
    return out


def p3p_solve(c1: Correspondence2D3D, c2: Correspondence2D3D, c3: Correspondence2D3D,
              intrinsics: CameraIntrinsics) -> list[Pose]:
    """Up to four poses reprojecting the three world points onto their pixels."""
    pixels = np.array([c.image_point for c in (c1, c2, c3)], dtype=np.float64)
    world = np.array([c.world_point for c in (c1, c2, c3)], dtype=np.float64)
    cands = []
    for R, t in p3p_arrays(bearings(pixels, intrinsics), world):
        cam = world @ R.T + t
        if (cam[:, 2] <= 0).any():
            continue
        res = np.linalg.norm(project(cam, intrinsics) - pixels, axis=1).max()
        if res < RESIDUAL_TOL_PX:
            cands.append(Pose.from_matrix(R, t))
    if not cands:
        raise EmptySolution("no real P3P solution")
    return cands
