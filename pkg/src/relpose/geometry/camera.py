"""Pinhole camera, rigid poses, depth maps and reprojection.

Pixel coordinates follow the feature-grid convention: ``x`` runs along
image rows, ``y`` along columns, so ``x = fx * X / Z + cx`` and
``y = fy * Y / Z + cy`` in the camera frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import BehindCameraError, DepthError, FormatError
from ..formats import read_dmap, write_dmap


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        """C^-1 [x, y, 1] for each pixel, shape [..., 3]."""
        pixels = np.asarray(pixels, dtype=np.float64)
        out = np.empty(pixels.shape[:-1] + (3,))
        out[..., 0] = (pixels[..., 0] - self.cx) / self.fx
        out[..., 1] = (pixels[..., 1] - self.cy) / self.fy
        out[..., 2] = 1.0
        return out

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``X -> R X + t``; ``q`` is a unit quaternion (w, x, y, z)."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _canonical(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t) -> "Pose":
        x, y, z, w = Rotation.from_matrix(R).as_quat()
        return cls(np.array([w, x, y, z]), t)

    @classmethod
    def from_rotvec(cls, rotvec, t) -> "Pose":
        x, y, z, w = Rotation.from_rotvec(rotvec).as_quat()
        return cls(np.array([w, x, y, z]), t)

    @property
    def R(self) -> np.ndarray:
        w, x, y, z = self.q
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    @property
    def matrix(self) -> np.ndarray:
        """3x4 ``(R | t)``."""
        return np.hstack([self.R, self.t[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        R = self.R
        return Pose.from_matrix(R @ other.R, R @ other.t + self.t)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose.from_matrix(Rt, -Rt @ self.t)

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        try:
            return cls(np.array(d["q"], dtype=np.float64), np.array(d["t"], dtype=np.float64))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"bad pose JSON: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Pose":
        return cls.from_dict(json.loads(text))


def relative_pose(query: Pose, reference: Pose) -> Pose:
    """Reference-camera -> query-camera transform ``query ∘ reference^-1``."""
    return query.compose(reference.inverse())


def rotation_angle_deg(R: np.ndarray) -> float:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    return float(np.degrees(2.0 * np.arctan2(np.linalg.norm([x, y, z]), abs(w))))


def pose_error(estimate: Pose, truth: Pose) -> tuple[float, float]:
    """(rotation angle of R_est R_gt^T in degrees, ||t_est - t_gt|| in meters)."""
    return rotation_angle_deg(estimate.R @ truth.R.T), float(np.linalg.norm(estimate.t - truth.t))


class DepthMap:
    """Along-ray Euclidean distances; non-positive entries are invalid."""

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("depth map must be 2D")
        self.valid = self.values > 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def sample(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear depth at ``pixels`` [..., 2] plus a validity mask."""
        from ..autodiff import Tensor, bilinear_sample, bilinear_valid

        pixels = np.asarray(pixels, dtype=np.float64)
        rows, cols = self.shape
        inside = ((pixels[..., 0] >= 0) & (pixels[..., 0] <= rows - 1)
                  & (pixels[..., 1] >= 0) & (pixels[..., 1] <= cols - 1))
        vals = bilinear_sample(self.values, Tensor(pixels)).data
        ok = inside & bilinear_valid(self.valid, pixels)
        return vals, ok

    def nearest(self, pixel) -> float | None:
        r, c = int(np.floor(pixel[0] + 0.5)), int(np.floor(pixel[1] + 0.5))
        rows, cols = self.shape
        if not (0 <= r < rows and 0 <= c < cols):
            return None
        return float(self.values[r, c])

    def save(self, path) -> None:
        write_dmap(path, np.where(self.valid, self.values, -1.0))

    @classmethod
    def load(cls, path) -> "DepthMap":
        return cls(read_dmap(path))

    @classmethod
    def quantized(cls, values: np.ndarray) -> "DepthMap":
        """Round through float32, matching what a DMAP round-trip stores."""
        return cls(np.asarray(values, dtype=np.float32).astype(np.float64))


@dataclass(frozen=True)
class Correspondence2D3D:
    image_point: np.ndarray  # query pixel
    world_point: np.ndarray  # 3D point in the reference (or world) frame
    weight: float = 1.0


def backproject(pixel, depth, intrinsics: CameraIntrinsics) -> np.ndarray:
    """unit(C^-1 [x, y, 1]) * depth; works on batches ``pixel[..., 2]``."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise DepthError("depth must be positive")
    ray = intrinsics.normalize(pixel)
    return ray / np.linalg.norm(ray, axis=-1, keepdims=True) * depth[..., None]


def project(points: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    return np.stack([intrinsics.fx * points[..., 0] / z + intrinsics.cx,
                     intrinsics.fy * points[..., 1] / z + intrinsics.cy], axis=-1)


def reproject(ref_pixel, ref_depth, relative: Pose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Map a reference pixel with depth into the query image."""
    X = relative.apply(backproject(ref_pixel, ref_depth, intrinsics))
    if np.any(X[..., 2] <= 0):
        raise BehindCameraError("point lands behind the query camera")
    return project(X, intrinsics)


class Visibility(str, Enum):
    VISIBLE = "visible"
    OCCLUDED = "occluded"
    OUT_OF_VIEW = "out-of-view"


def occlusion_check(ref_pixel, ref_depth: float, relative: Pose, intrinsics: CameraIntrinsics,
                    query_depth: DepthMap, margin: float = 0.05) -> Visibility:
    """Compare the query depth at the reprojected pixel with the point's z."""
    X = relative.apply(backproject(ref_pixel, ref_depth, intrinsics))
    if X[2] <= 0:
        return Visibility.OUT_OF_VIEW
    pix = project(X, intrinsics)
    stored = query_depth.nearest(pix)
    if stored is None:
        return Visibility.OUT_OF_VIEW
    if stored <= 0:
        return Visibility.VISIBLE
    ray = intrinsics.normalize(pix)
    z_surface = stored / np.linalg.norm(ray)
    if z_surface < X[2] - margin:
        return Visibility.OCCLUDED
    return Visibility.VISIBLE
