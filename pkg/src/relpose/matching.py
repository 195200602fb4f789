"""Weighted correlation volume, V-Net matching layer and correspondence extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import FormatError, ShapeError
from .features import FeatureGrid, softargmax_cell_coords
from .formats import ensure_dir, load_tnsr, save_tnsr
from .hilbert import HilbertMap, ravel_volume

DEFAULT_WIDTHS = (8, 16, 32)
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class CorrelationVolume:
    values: ad.Tensor  # [h, w, h*w + 1], last channel is the zero dustbin
    hilbert: HilbertMap
    source: tuple[str, str] = ("query", "reference")


@dataclass(frozen=True)
class MatchMap:
    logits: ad.Tensor  # M_raw
    probs: ad.Tensor  # M, softmax over all h*w + 1 channels
    weights: ad.Tensor  # M' = 1 - M[..., dustbin]


@dataclass(frozen=True)
class SoftCorrespondenceSet:
    query_kp: ad.Tensor  # kp(i, j) in the query, [h, w, 2]
    ref_kp: ad.Tensor  # kp'(i, j) in the reference, [h, w, 2]
    weights: ad.Tensor  # M'(i, j), [h, w]
    ref_points: ad.Tensor | None = None  # 3D points in the reference camera, [h, w, 3]
    valid: np.ndarray | None = None  # [h, w], False where kp' has no usable depth


@dataclass(frozen=True)
class DiscreteMatches:
    """Hard correspondences as parallel arrays, one row per match."""

    query_px: np.ndarray
    ref_px: np.ndarray
    weight: np.ndarray
    cells: np.ndarray  # (i, j) of the query cell

    def __len__(self) -> int:
        return len(self.weight)

    @classmethod
    def empty(cls) -> "DiscreteMatches":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2), dtype=np.int64))


def correlation_volume(query: FeatureGrid, reference: FeatureGrid, hmap: HilbertMap) -> CorrelationVolume:
    h, w = query.cells_h, query.cells_w
    if (reference.cells_h, reference.cells_w) != (h, w):
        raise ShapeError(f"grid sizes differ: {(h, w)} vs {(reference.cells_h, reference.cells_w)}")
    if (hmap.rows, hmap.cols) != (h, w):
        raise ShapeError(f"curve {hmap.rows}x{hmap.cols} does not match grid {h}x{w}")
    dots = ad.einsum("ijd,kld->ijkl", query.descriptors, reference.descriptors)
    kq = ad.reshape(query.confidence, (h, w, 1, 1))
    kr = ad.reshape(reference.confidence, (1, 1, h, w))
    shape = (h, w, h, w)
    c4 = ad.mul(ad.mul(ad.broadcast_to(kq, shape), ad.broadcast_to(kr, shape)), dots)
    return CorrelationVolume(ravel_volume(c4, hmap), hmap)


# ---------------------------------------------------------------------------
# Matching layer


@dataclass
class MatchLayerParams:
    """Kernels and PReLU slopes of the encoder-decoder, keyed by name.

    Besides the V-Net stages the layer has a learnable gain on the input
    volume (a residual path to the logits) and a learnable dustbin bias.
    """

    widths: tuple[int, ...]
    tensors: dict[str, ad.Tensor] = field(default_factory=dict)

    @property
    def stages(self) -> int:
        return len(self.widths)

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def values(self) -> list[ad.Tensor]:
        return list(self.tensors.values())

    def items(self):
        return self.tensors.items()

    @staticmethod
    def shapes(widths: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        out["enc0.conv"] = (3, 3, 3, 1, widths[0])
        out["enc0.slope"] = (widths[0],)
        for s in range(1, len(widths)):
            out[f"enc{s}.down"] = (3, 3, 3, widths[s - 1], widths[s])
            out[f"enc{s}.slope_down"] = (widths[s],)
            out[f"enc{s}.conv"] = (3, 3, 3, widths[s], widths[s])
            out[f"enc{s}.slope"] = (widths[s],)
        for s in range(len(widths) - 1, 0, -1):
            out[f"dec{s}.up"] = (2, 2, 2, widths[s], widths[s - 1])
            out[f"dec{s}.slope_up"] = (widths[s - 1],)
            out[f"dec{s}.conv"] = (3, 3, 3, widths[s - 1], widths[s - 1])
            out[f"dec{s}.slope"] = (widths[s - 1],)
        out["head"] = (1, 1, 1, widths[0], 1)
        out["input_gain"] = (1,)
        out["dustbin_bias"] = (1,)
        return out

    @classmethod
    def init(cls, rng: np.random.Generator, widths=DEFAULT_WIDTHS, cells: int = 64,
             input_gain: float = 30.0, gate: float = 0.2, head_scale: float = 0.01) -> "MatchLayerParams":
        """He-normal kernels, PReLU slopes 0.25 and a small output head.

        The dustbin bias starts at ``log(cells) + gate * input_gain``: a row
        whose correlations are all equal to ``gate`` gets M' = 1/2, so weaker
        rows start out leaning to "no match".
        """
        widths = tuple(int(w) for w in widths)
        tensors = {}
        for name, shape in cls.shapes(widths).items():
            if ".slope" in name:
                data = np.full(shape, ad.PRELU_INIT)
            elif name == "head":
                data = rng.normal(0.0, head_scale, size=shape)
            elif name == "input_gain":
                data = np.full(shape, input_gain)
            elif name == "dustbin_bias":
                data = np.full(shape, np.log(max(cells, 1)) + gate * input_gain)
            else:
                fan_in = int(np.prod(shape[:4]))
                data = ad.fan_in_normal(rng, shape, fan_in)
            tensors[name] = ad.parameter(data, name=name)
        return cls(widths, tensors)

    @classmethod
    def zeros(cls, widths=DEFAULT_WIDTHS) -> "MatchLayerParams":
        widths = tuple(int(w) for w in widths)
        return cls(widths, {n: ad.parameter(np.zeros(s), name=n) for n, s in cls.shapes(widths).items()})

    def copy(self) -> "MatchLayerParams":
        return MatchLayerParams(self.widths, {n: ad.parameter(t.data.copy(), name=n)
                                              for n, t in self.tensors.items()})

    def save(self, directory, hmap: HilbertMap | None = None, extra: dict | None = None) -> None:
        d = ensure_dir(directory)
        for name, t in self.tensors.items():
            save_tnsr(d / f"{name}.tnsr", t.data)
        manifest = {"stages": self.stages, "widths": list(self.widths),
                    "tensors": list(self.tensors.keys())}
        if hmap is not None:
            manifest["curve"] = {"rows": hmap.rows, "cols": hmap.cols, "file": "hilbert.csv"}
            hmap.dump_csv(d / "hilbert.csv")
        if extra:
            manifest.update(extra)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "MatchLayerParams":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
            widths = tuple(int(w) for w in manifest["widths"])
        except (OSError, ValueError, KeyError) as exc:
            raise FormatError(f"bad checkpoint manifest in {d}: {exc}") from None
        tensors = {}
        for name, shape in cls.shapes(widths).items():
            data = load_tnsr(d / f"{name}.tnsr")
            if data.shape != shape:
                raise FormatError(f"{name}: shape {data.shape}, expected {shape}")
            tensors[name] = ad.parameter(data, name=name)
        return cls(widths, tensors)


def load_checkpoint_curve(directory) -> HilbertMap | None:
    p = Path(directory) / "hilbert.csv"
    return HilbertMap.from_csv(p) if p.exists() else None


def _prelu(x: ad.Tensor, slope: ad.Tensor) -> ad.Tensor:
    return ad.prelu(x, slope)


def matching_forward(volume: CorrelationVolume, params: MatchLayerParams) -> MatchMap:
    c3 = volume.values
    h, w, L = c3.shape
    unit = 2 ** (params.stages - 1)
    padded = tuple(-(-n // unit) * unit for n in (h, w, L))
    x = ad.pad_end(ad.reshape(c3, (h, w, L, 1)), padded + (1,))

    e = _prelu(ad.conv3d(x, params["enc0.conv"]), params["enc0.slope"])
    skips = [e]
    for s in range(1, params.stages):
        d = _prelu(ad.conv3d(skips[-1], params[f"enc{s}.down"], stride=2), params[f"enc{s}.slope_down"])
        r = _prelu(ad.add(ad.conv3d(d, params[f"enc{s}.conv"]), d), params[f"enc{s}.slope"])
        skips.append(r)
    y = skips[-1]
    for s in range(params.stages - 1, 0, -1):
        target = skips[s - 1]
        u = ad.transposed_conv3d(y, params[f"dec{s}.up"], output_shape=target.shape)
        u = _prelu(ad.add(u, target), params[f"dec{s}.slope_up"])
        y = _prelu(ad.add(ad.conv3d(u, params[f"dec{s}.conv"]), u), params[f"dec{s}.slope"])
    out = ad.conv3d(y, params["head"])
    out = ad.reshape(ad.crop_end(out, (h, w, L, 1)), (h, w, L))

    gain = ad.broadcast_to(params["input_gain"], (h, w, L))
    onehot = np.zeros((1, L))
    onehot[0, -1] = 1.0
    bias = ad.einsum("a,bc->bc", params["dustbin_bias"], ad.constant(onehot))
    bias = ad.broadcast_to(ad.reshape(bias, (1, 1, L)), (h, w, L))
    logits = ad.add(ad.add(out, ad.mul(gain, c3)), bias)
    probs = ad.softmax_axis(logits, axis=2)
    weights = 1.0 - probs[:, :, L - 1]
    return MatchMap(logits, probs, weights)


# ---------------------------------------------------------------------------
# Correspondences


def reference_kp_by_curve(reference_kp: ad.Tensor, hmap: HilbertMap) -> ad.Tensor:
    """Reference keypoints listed in curve order, [h*w, 2]."""
    flat = ad.reshape(reference_kp, (hmap.size, 2))
    return ad.take(flat, hmap.flat_order, axis=0)


def soft_matches(match: MatchMap, reference_kp: ad.Tensor, query_kp: ad.Tensor, hmap: HilbertMap,
                 dustbin_in_denominator: bool = False) -> SoftCorrespondenceSet:
    """kp'(i, j) = sum_k s_M(i, j, k) kp_ref(curve^-1(k)).

    ``s_M`` renormalizes over the first h*w channels (the dustbin is left out
    of the denominator).  ``dustbin_in_denominator=True`` uses M directly.
    """
    n = hmap.size
    if dustbin_in_denominator:
        s = ad.take(match.probs, np.arange(n), axis=2)
    else:
        s = ad.softmax_axis(match.logits, axis=2, channel_range=(0, n))
    kp_prime = ad.einsum("ijk,kd->ijd", s, reference_kp_by_curve(reference_kp, hmap))
    return SoftCorrespondenceSet(query_kp, kp_prime, match.weights)


def hard_matches(corr: SoftCorrespondenceSet, match: MatchMap | None = None,
                 weight_threshold: float = DEFAULT_THRESHOLD) -> DiscreteMatches:
    """Cells with M'(i, j) >= threshold, each as ``(kp, kp', M')``."""
    weights = (match.weights if match is not None else corr.weights).data
    keep = weights >= weight_threshold
    cells = np.argwhere(keep)
    return DiscreteMatches(corr.query_kp.data[keep].reshape(-1, 2), corr.ref_kp.data[keep].reshape(-1, 2),
                           weights[keep], cells)


def baseline_argmax_matching(query: FeatureGrid, reference: FeatureGrid,
                             ratio: float = 0.7) -> DiscreteMatches:
    """Nearest reference descriptor per query cell under Lowe's ratio test."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    h, w = query.cells_h, query.cells_w
    dq = query.descriptors.data.reshape(h * w, -1)
    dr = reference.descriptors.data.reshape(reference.cells_h * reference.cells_w, -1)
    dots = dq @ dr.T
    if dots.shape[1] < 2:
        return DiscreteMatches.empty()
    order = np.argsort(-dots, axis=1, kind="stable")
    best, second = order[:, 0], order[:, 1]
    rows = np.arange(len(dq))
    d1 = np.sqrt(np.maximum(2 - 2 * dots[rows, best], 0.0))
    d2 = np.sqrt(np.maximum(2 - 2 * dots[rows, second], 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(d2 > 0, d1 / np.where(d2 > 0, d2, 1.0), np.where(d1 > 0, np.inf, 1.0))
    keep = r <= ratio
    kq = softargmax_cell_coords(query).data.reshape(h * w, 2)
    kr = softargmax_cell_coords(reference).data.reshape(-1, 2)
    cells = np.stack(np.divmod(np.nonzero(keep)[0], w), axis=1)
    return DiscreteMatches(kq[keep], kr[best[keep]], np.ones(int(keep.sum())), cells)
