"""The trainable pipeline: keypoint head + correlation + matching layer, and its checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import FormatError
from .features import FeatureGrid, KeypointHead, softargmax_cell_coords
from .formats import load_tnsr, save_tnsr
from .hilbert import HilbertMap, build_pseudo_hilbert
from .losses import (ALPHA, BETA, LossBreakdown, attach_reference_points, build_dlt, inlier_loss,
                     keypoint_ce_loss, pose_loss, total_loss)
from .matching import (DEFAULT_WIDTHS, CorrelationVolume, MatchLayerParams, MatchMap, SoftCorrespondenceSet,
                       correlation_volume, matching_forward, soft_matches)


@dataclass
class RelPoseModel:
    matcher: MatchLayerParams
    head: KeypointHead
    hilbert: HilbertMap
    dustbin_in_denominator: bool = False

    @classmethod
    def init(cls, rows: int, cols: int, seed: int = 0, widths=DEFAULT_WIDTHS,
             descriptor_dim: int = 256, **kwargs) -> "RelPoseModel":
        rng = np.random.default_rng(seed)
        return cls(MatchLayerParams.init(rng, widths, cells=rows * cols, **kwargs),
                   KeypointHead(descriptor_dim), build_pseudo_hilbert(rows, cols))

    def matcher_parameters(self) -> dict[str, ad.Tensor]:
        return dict(self.matcher.items())

    def keypoint_parameters(self) -> dict[str, ad.Tensor]:
        return self.head.parameters

    def parameters(self) -> dict[str, ad.Tensor]:
        return {**self.matcher_parameters(), **self.keypoint_parameters()}

    def extract(self, features: FeatureGrid) -> FeatureGrid:
        """Re-run the keypoint head on a view's stored raw maps."""
        return self.head(features.raw_logits.data, features.raw_descriptors.data)

    def save(self, directory) -> None:
        self.matcher.save(directory, self.hilbert, extra={"keypoint_head": sorted(self.head.parameters),
                                                          "dustbin_in_denominator": self.dustbin_in_denominator})
        d = Path(directory)
        for name, t in self.head.parameters.items():
            save_tnsr(d / f"{name}.tnsr", t.data)

    @classmethod
    def load(cls, directory) -> "RelPoseModel":
        d = Path(directory)
        matcher = MatchLayerParams.load(d)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
            curve = manifest["curve"]
        except (OSError, ValueError, KeyError) as exc:
            raise FormatError(f"checkpoint {d} lacks a curve: {exc}") from None
        hmap = HilbertMap.from_csv(d / curve["file"])
        if (hmap.rows, hmap.cols) != (curve["rows"], curve["cols"]):
            raise FormatError("curve dump does not match manifest dims")
        proj = load_tnsr(d / "desc_proj.tnsr")
        head = KeypointHead(proj.shape[0])
        for name, t in head.parameters.items():
            data = load_tnsr(d / f"{name}.tnsr")
            if data.shape != t.shape:
                raise FormatError(f"{name}: shape {data.shape}, expected {t.shape}")
            t.data = data
        return cls(matcher, head, hmap, bool(manifest.get("dustbin_in_denominator", False)))


@dataclass
class PairForward:
    query: FeatureGrid
    reference: FeatureGrid
    volume: CorrelationVolume
    match: MatchMap
    soft: SoftCorrespondenceSet


def forward_pair(model: RelPoseModel, query: FeatureGrid, reference: FeatureGrid) -> PairForward:
    gq, gr = model.extract(query), model.extract(reference)
    vol = correlation_volume(gq, gr, model.hilbert)
    match = matching_forward(vol, model.matcher)
    soft = soft_matches(match, softargmax_cell_coords(gr), softargmax_cell_coords(gq), model.hilbert,
                        model.dustbin_in_denominator)
    return PairForward(gq, gr, vol, match, soft)


def pair_loss(model: RelPoseModel, pair, targets: dict[str, np.ndarray] | None = None,
              alpha: float = ALPHA, beta: float = BETA) -> tuple[LossBreakdown, PairForward]:
    """Full loss of one ScenePair; keypoint targets keyed by view id."""
    fw = forward_pair(model, pair.query.features, pair.reference.features)
    intr = pair.query.intrinsics
    corr = attach_reference_points(fw.soft, pair.reference.depth, intr)
    depth = pair.reference.depth
    scale = float(depth.values[depth.valid].mean()) if depth.valid.any() else 1.0
    lp = pose_loss(build_dlt(corr, intr, pair.relative_pose, scale))
    li = inlier_loss(corr, pair.relative_pose, intr)
    if targets is not None and pair.query.id in targets and pair.reference.id in targets:
        lk = keypoint_ce_loss([fw.query, fw.reference], [targets[pair.query.id], targets[pair.reference.id]])
    else:
        lk = ad.constant(0.0)
    return total_loss(lp, li, lk, alpha, beta), fw
