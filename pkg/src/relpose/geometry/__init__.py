from .camera import (
    CameraIntrinsics,
    Correspondence2D3D,
    DepthMap,
    Pose,
    Visibility,
    backproject,
    occlusion_check,
    pose_error,
    project,
    relative_pose,
    reproject,
)
from .lm import lm_refine, reprojection_cost
from .p3p import p3p_solve
from .ransac import adaptive_iterations, ransac_pose, reprojection_residuals

__all__ = [
    "CameraIntrinsics", "Correspondence2D3D", "DepthMap", "Pose", "Visibility", "backproject",
    "occlusion_check", "pose_error", "project", "relative_pose", "reproject", "lm_refine",
    "reprojection_cost", "p3p_solve", "adaptive_iterations", "ransac_pose",
    "reprojection_residuals",
]
