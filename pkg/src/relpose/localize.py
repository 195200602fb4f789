"""Pairwise pose estimation, retrieval-conditioned localization, pose refinement, metrics."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import LocalizationFailure, NoPoseError
from .geometry.camera import CameraIntrinsics, DepthMap, Pose, backproject, pose_error
from .geometry.lm import lm_refine, reprojection_cost
from .geometry.ransac import ransac_pose, reprojection_residuals
from .matching import DEFAULT_THRESHOLD, DiscreteMatches, baseline_argmax_matching, hard_matches
from .model import RelPoseModel, forward_pair
from .synth import ScenePair, View

INLIER_PX = 8.0
METRICS_COLUMNS = ["pair_id", "inlier_ratio", "rot_err_deg", "trans_err_m", "estimated"]


@dataclass
class MatchOptions:
    matcher: str = "network"  # or "argmax"
    weight_threshold: float = DEFAULT_THRESHOLD
    ratio: float = 0.7
    inlier_px: float = INLIER_PX
    confidence: float = 0.999
    max_iters: int = 1000
    lm_iters: int = 50
    seed: int = 0


def match_views(query: View, reference: View, model: RelPoseModel | None,
                options: MatchOptions) -> DiscreteMatches:
    if options.matcher == "argmax" or model is None:
        return baseline_argmax_matching(query.features, reference.features, options.ratio)
    fw = forward_pair(model, query.features, reference.features)
    return hard_matches(fw.soft, fw.match, options.weight_threshold)


def lift_matches(matches: DiscreteMatches, depth: DepthMap,
                 intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(query pixels, reference-camera 3D points, kept-row indices) for matches with valid depth."""
    if len(matches) == 0:
        return np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    d, ok = depth.sample(matches.ref_px)
    idx = np.nonzero(ok & (d > 0))[0]
    if len(idx) == 0:
        return np.zeros((0, 2)), np.zeros((0, 3)), idx
    pts = backproject(matches.ref_px[idx], d[idx], intrinsics)
    return matches.query_px[idx], pts, idx


def inlier_ratio(matches: DiscreteMatches, reference_depth: DepthMap, truth: Pose,
                 intrinsics: CameraIntrinsics, inlier_px: float = INLIER_PX) -> float:
    """Fraction of matches whose reference point reprojects within ``inlier_px`` of
    the query keypoint under the true pose.  Matches without valid reference
    depth or landing behind the query count as outliers; no matches gives 0."""
    if len(matches) == 0:
        return 0.0
    qpx, pts, _ = lift_matches(matches, reference_depth, intrinsics)
    good = 0
    for q, X in zip(qpx, pts):
        cam = truth.apply(X)
        if cam[2] <= 0:
            continue
        px = np.array([intrinsics.fx * cam[0] / cam[2] + intrinsics.cx,
                       intrinsics.fy * cam[1] / cam[2] + intrinsics.cy])
        good += np.linalg.norm(px - q) <= inlier_px
    return good / len(matches)


@dataclass
class PairPose:
    pose: Pose | None
    inliers: int
    image_points: np.ndarray
    ref_points: np.ndarray  # reference-camera frame
    mask: np.ndarray
    cost: float = np.inf


def estimate_relative_pose(matches: DiscreteMatches, reference: View, options: MatchOptions,
                           seed: int | None = None) -> PairPose:
    qpx, pts, _ = lift_matches(matches, reference.depth, reference.intrinsics)
    try:
        pose, mask = ransac_pose((qpx, pts), reference.intrinsics, options.inlier_px, options.confidence,
                                 options.max_iters, options.seed if seed is None else seed)
    except NoPoseError:
        return PairPose(None, 0, qpx, pts, np.zeros(len(qpx), bool))
    refined = lm_refine(pose, (qpx[mask], pts[mask]), reference.intrinsics, options.lm_iters)
    cost = reprojection_cost(refined, (qpx[mask], pts[mask]), reference.intrinsics)
    return PairPose(refined, int(mask.sum()), qpx, pts, mask, cost)


@dataclass
class PairEvaluation:
    pair_id: str
    inlier_ratio: float
    rot_err_deg: float
    trans_err_m: float
    estimated: bool
    matches: int


@dataclass
class MetricsSummary:
    mean_inlier_ratio: float
    n_pct: float
    r_a: float
    r_m: float
    t_a: float
    t_m: float
    count: int

    def to_dict(self) -> dict:
        return {"alpha_bar": self.mean_inlier_ratio, "N_pct": self.n_pct, "r_a": self.r_a, "r_m": self.r_m,
                "t_a": self.t_a, "t_m": self.t_m, "count": self.count}


def summarize(rows: Sequence[PairEvaluation]) -> MetricsSummary:
    n = len(rows)
    est = [r for r in rows if r.estimated]
    rot = np.array([r.rot_err_deg for r in est])
    tr = np.array([r.trans_err_m for r in est])
    nan = float("nan")
    return MetricsSummary(
        float(np.mean([r.inlier_ratio for r in rows])) if n else nan,
        100.0 * len(est) / n if n else 0.0,
        float(rot.mean()) if len(est) else nan, float(np.median(rot)) if len(est) else nan,
        float(tr.mean()) if len(est) else nan, float(np.median(tr)) if len(est) else nan,
        n)


def evaluate_pairs(pairs: Sequence[ScenePair], model: RelPoseModel | None,
                   options: MatchOptions | None = None) -> tuple[MetricsSummary, list[PairEvaluation]]:
    options = options or MatchOptions()
    rows = []
    for k, pair in enumerate(pairs):
        m = match_views(pair.query, pair.reference, model, options)
        ratio = inlier_ratio(m, pair.reference.depth, pair.relative_pose, pair.query.intrinsics,
                             options.inlier_px)
        est = estimate_relative_pose(m, pair.reference, options, seed=options.seed + k)
        if est.pose is None:
            rows.append(PairEvaluation(pair.id, ratio, float("nan"), float("nan"), False, len(m)))
        else:
            r, t = pose_error(est.pose, pair.relative_pose)
            rows.append(PairEvaluation(pair.id, ratio, r, t, True, len(m)))
    return summarize(rows), rows


def write_metrics_csv(path, rows: Sequence[PairEvaluation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([r.pair_id, repr(float(r.inlier_ratio)), repr(float(r.rot_err_deg)),
                        repr(float(r.trans_err_m)), int(r.estimated)])


# ---------------------------------------------------------------------------
# Localization


@dataclass
class CandidateResult:
    reference_id: str
    relative_pose: Pose | None
    inliers: int
    cost: float
    global_pose: Pose | None = None
    image_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)), repr=False)
    world_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)), repr=False)


@dataclass
class LocalizationResult:
    query_id: str
    pose: Pose | None  # camera-from-world
    inlier_count: int
    candidates: list[CandidateResult]
    best_index: int = -1
    refined: bool = False
    timing_ms: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {"query_id": self.query_id, "pose": None if self.pose is None else self.pose.to_dict(),
             "inlier_count": self.inlier_count, "refined": self.refined,
             "best_reference": self.candidates[self.best_index].reference_id if self.best_index >= 0 else None,
             "candidates": [{"reference_id": c.reference_id, "inliers": c.inliers,
                             "relative_pose": None if c.relative_pose is None else c.relative_pose.to_dict()}
                            for c in self.candidates]}
        if include_timing:
            d["timing_ms"] = self.timing_ms
        return d


def localize(query: View, database: dict[str, View] | Sequence[View], retrieval: Sequence[str],
             model: RelPoseModel | None, options: MatchOptions | None = None) -> LocalizationResult:
    """Relative pose to each retrieved view; keep the one with most inliers."""
    options = options or MatchOptions()
    db = database if isinstance(database, dict) else {v.id: v for v in database}
    t0 = time.perf_counter()
    cands = []
    for k, rid in enumerate(retrieval):
        ref = db[rid]
        m = match_views(query, ref, model, options)
        est = estimate_relative_pose(m, ref, options, seed=options.seed + k)
        c = CandidateResult(rid, est.pose, est.inliers, est.cost)
        if est.pose is not None:
            c.global_pose = est.pose.compose(ref.global_pose)
            to_world = ref.global_pose.inverse()
            c.image_points = est.image_points
            c.world_points = to_world.apply(est.ref_points) if len(est.ref_points) else np.zeros((0, 3))
        cands.append(c)
    ok = [k for k, c in enumerate(cands) if c.relative_pose is not None and c.inliers >= 4]
    elapsed = 1000 * (time.perf_counter() - t0)
    if not ok:
        raise LocalizationFailure(f"no candidate of {query.id} produced a pose")
    # most inliers, then lower LM cost, then retrieval order
    best = min(ok, key=lambda k: (-cands[k].inliers, cands[k].cost, k))
    return LocalizationResult(query.id, cands[best].global_pose, cands[best].inliers, cands,
                              best, False, elapsed)


def pose_refinement(result: LocalizationResult, intrinsics: CameraIntrinsics, merge_dist_m: float = 1.0,
                    options: MatchOptions | None = None) -> LocalizationResult:
    """Pool world correspondences of candidates whose global estimate lies within
    ``merge_dist_m`` (camera centers) of the best one and re-solve."""
    options = options or MatchOptions()
    if result.pose is None or result.best_index < 0:
        return result
    t0 = time.perf_counter()
    center = result.pose.center
    img, world = [], []
    for c in result.candidates:
        if c.global_pose is None or len(c.image_points) == 0:
            continue
        if np.linalg.norm(c.global_pose.center - center) <= merge_dist_m:
            img.append(c.image_points)
            world.append(c.world_points)
    if not img:
        return result
    img_all, world_all = np.concatenate(img), np.concatenate(world)
    if len(img_all) < 4:
        return result
    try:
        pose, mask = ransac_pose((img_all, world_all), intrinsics, options.inlier_px, options.confidence,
                                 options.max_iters, options.seed)
    except NoPoseError:
        return result
    refined = lm_refine(pose, (img_all[mask], world_all[mask]), intrinsics, options.lm_iters)
    # keep the better of the refined pose and P_max on the pooled set
    n_ref = int((reprojection_residuals(refined.R, refined.t, img_all, world_all, intrinsics)
                 <= options.inlier_px).sum())
    n_old = int((reprojection_residuals(result.pose.R, result.pose.t, img_all, world_all, intrinsics)
                 <= options.inlier_px).sum())
    elapsed = result.timing_ms + 1000 * (time.perf_counter() - t0)
    if n_ref < n_old:
        return LocalizationResult(result.query_id, result.pose, result.inlier_count, result.candidates,
                                  result.best_index, False, elapsed)
    return LocalizationResult(result.query_id, refined, n_ref, result.candidates, result.best_index, True,
                              elapsed)

