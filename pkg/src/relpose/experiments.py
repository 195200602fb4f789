"""Desk-scale experiments shared by the CLI and the acceptance tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .localize import MatchOptions, MetricsSummary, evaluate_pairs
from .model import RelPoseModel
from .synth import ScenePair, SynthConfig, build_pairs, generate_scene
from .trainer import TrainConfig, smoothed, train

log = logging.getLogger(__name__)


def sample_pairs(seeds, per_scene: int, config: SynthConfig) -> list[ScenePair]:
    """``per_scene`` random pairs from each scene generated with the given seeds."""
    out: list[ScenePair] = []
    for s in seeds:
        views, _ = generate_scene(SynthConfig.from_dict({**config.to_dict(), "seed": int(s)}))
        pairs = build_pairs(views)
        rng = np.random.default_rng(s)
        out += [pairs[k] for k in rng.permutation(len(pairs))[:per_scene]]
    return out


@dataclass
class ToyTrainingReport:
    baseline: MetricsSummary
    initial: MetricsSummary
    trained: MetricsSummary
    loss_start: float
    loss_end: float
    seconds: float
    log: list[dict] = field(repr=False, default_factory=list)

    @property
    def relative_gain(self) -> float:
        return self.trained.mean_inlier_ratio / self.baseline.mean_inlier_ratio - 1.0


def toy_training(n_train: int = 200, n_test: int = 50, train_cfg: TrainConfig | None = None,
                 scene_cfg: SynthConfig | None = None, seed: int = 0, per_scene: int = 20) -> ToyTrainingReport:
    """Train on synthetic pairs and compare held-out inlier ratios with the argmax baseline.

    Training and held-out pairs come from disjoint scenes.
    """
    scene_cfg = scene_cfg or SynthConfig()
    train_cfg = train_cfg or TrainConfig(learning_rate=1e-5, batch_size=4, epochs=100, seed=seed)
    n_tr_scenes = -(-n_train // per_scene)
    n_te_scenes = -(-n_test // (per_scene // 2))
    tr = sample_pairs(range(seed * 1000, seed * 1000 + n_tr_scenes), per_scene, scene_cfg)[:n_train]
    te = sample_pairs(range(seed * 1000 + 500, seed * 1000 + 500 + n_te_scenes), per_scene // 2, scene_cfg)[:n_test]
    model = RelPoseModel.init(scene_cfg.grid_h, scene_cfg.grid_w, seed=seed,
                              descriptor_dim=scene_cfg.descriptor_dim)
    baseline, _ = evaluate_pairs(te, None, MatchOptions(matcher="argmax"))
    initial, _ = evaluate_pairs(te, model)
    t0 = time.perf_counter()
    res = train(tr, model, train_cfg,
                lambda e, rows: log.info("epoch %d total %.4f", e, np.mean([r["total"] for r in rows])))
    secs = time.perf_counter() - t0
    trained, _ = evaluate_pairs(te, model)
    sm = smoothed(epoch_means(res.log), 10)
    return ToyTrainingReport(baseline, initial, trained, float(sm[0]), float(sm[-1]), secs, res.log)


def epoch_means(rows: list[dict], key: str = "total") -> list[float]:
    """Per-epoch mean of a logged loss column; every epoch sees every pair once."""
    by_epoch: dict[int, list[float]] = {}
    for r in rows:
        by_epoch.setdefault(int(r["epoch"]), []).append(float(r[key]))
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def full_chain_gradcheck(rows: int = 4, cols: int = 4, seed: int = 0, widths=(4, 8, 16), n_probes: int = 200,
                         descriptor_dim: int = 16, step: float = 1e-5) -> tuple[float, int]:
    """Finite-difference check of correlation -> ravel -> matching layer -> soft matches -> losses.

    Probes every trainable tensor (matching layer and keypoint head).  Returns
    (max relative error, number of probes).
    """
    from . import autodiff as ad
    from .model import pair_loss
    from .trainer import compute_targets

    cfg = SynthConfig(grid_h=rows, grid_w=cols, descriptor_dim=descriptor_dim, n_views=4, seed=seed)
    views, _ = generate_scene(cfg)
    pairs = build_pairs(views)
    if not pairs:
        raise RuntimeError("synthetic scene produced no pairs")
    pair = pairs[0]
    rng = np.random.default_rng(seed)
    model = RelPoseModel.init(rows, cols, seed=seed, widths=widths, descriptor_dim=descriptor_dim)
    # move off the symmetric init so every path carries gradient
    for p in model.parameters().values():
        p.data = p.data + 0.05 * rng.standard_normal(p.shape)
    targets = compute_targets(model, [pair])
    params = list(model.parameters().values())
    n = min(n_probes, sum(p.data.size for p in params))
    err = ad.gradcheck(lambda: pair_loss(model, pair, targets)[0].total, params, n, rng, step)
    return err, n


@dataclass
class LocalizationReport:
    n_queries: int
    n_pct: float
    median_t: float  # unrefined, metres
    median_t_refined: float
    median_r: float
    median_r_refined: float


def localization_experiment(n_db: int = 50, n_queries: int = 20, n_retrieved: int = 16, noise_sigma: float = 0.0,
                            outlier_fraction: float = 0.0, jitter_px: float = 0.0, seed: int = 0,
                            grid=(15, 20), descriptor_dim: int = 64) -> LocalizationReport:
    """Localize held-out views of one synthetic scene against the rest with the argmax matcher."""
    from .geometry import pose_error
    from .localize import localize, pose_refinement
    from .errors import LocalizationFailure
    from .synth import retrieval_lists

    cfg = SynthConfig(grid_h=grid[0], grid_w=grid[1], n_views=n_db + n_queries, descriptor_dim=descriptor_dim,
                      descriptor_noise_sigma=noise_sigma, outlier_fraction=outlier_fraction,
                      keypoint_jitter_px=jitter_px, seed=seed)
    views, _ = generate_scene(cfg)
    db, queries = views[:n_db], views[n_db:]
    lists = retrieval_lists(queries, db, n_retrieved)
    options = MatchOptions(matcher="argmax", seed=seed)
    t, tr, r, rr = [], [], [], []
    for q in queries:
        try:
            res = localize(q, db, lists[q.id], None, options)
        except LocalizationFailure:
            continue
        ref = pose_refinement(res, q.intrinsics, 1.0, options)
        e, er = pose_error(res.pose, q.global_pose), pose_error(ref.pose, q.global_pose)
        r.append(e[0]), t.append(e[1]), rr.append(er[0]), tr.append(er[1])
    nan = float("nan")
    med = lambda v: float(np.median(v)) if v else nan  # noqa: E731
    return LocalizationReport(len(queries), 100.0 * len(t) / len(queries), med(t), med(tr), med(r), med(rr))


def geometric_oracle(n_scenes: int = 1000, outlier_fraction: float = 0.0, n_points: int = 20, seed: int = 0,
                     min_outlier_px: float = 16.0, outlier_model: str = "uniform") -> tuple[int, int]:
    """RANSAC + LM on random scenes with exact correspondences plus outliers.

    ``outlier_model="uniform"`` draws outlier pixels anywhere in the image,
    redrawing any that land within ``min_outlier_px`` of the true projection.
    ``"displaced"`` moves the true projection by ``min_outlier_px`` to 4x that
    in a random direction, a harder near-miss model.
    Returns (scenes recovered to < 1e-4 deg and < 1e-6 m, scenes).
    """
    from .geometry import CameraIntrinsics, Pose, backproject, lm_refine, pose_error, ransac_pose
    from .errors import NoPoseError

    if outlier_model not in ("uniform", "displaced"):
        raise ValueError(f"unknown outlier model {outlier_model!r}")
    intr = CameraIntrinsics(160.0, 160.0, 60.0, 80.0)
    lo, hi = np.array([0.0, 0.0]), np.array([119.0, 159.0])
    rng = np.random.default_rng(seed)
    ok = 0
    for _ in range(n_scenes):
        pose = Pose.from_rotvec(rng.uniform(-0.5, 0.5, 3), rng.uniform(-1.0, 1.0, 3))
        px = rng.uniform(lo, hi, size=(n_points, 2))
        world = pose.inverse().apply(backproject(px, rng.uniform(2.0, 8.0, n_points), intr))
        n_out = int(round(outlier_fraction * n_points))
        if outlier_model == "displaced":
            ang = rng.uniform(0, 2 * np.pi, n_out)
            dist = rng.uniform(min_outlier_px, 4 * min_outlier_px, n_out)
            px[:n_out] += dist[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        else:
            for i in range(n_out):
                true = px[i].copy()
                while np.linalg.norm(px[i] - true) < min_outlier_px:
                    px[i] = rng.uniform(lo, hi)
        try:
            est, mask = ransac_pose((px, world), intr, seed=int(rng.integers(2**31)))
        except NoPoseError:
            continue
        est = lm_refine(est, (px[mask], world[mask]), intr)
        r, t = pose_error(est, pose)
        ok += r < 1e-4 and t < 1e-6
    return ok, n_scenes
