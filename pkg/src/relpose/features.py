"""Per-view keypoint/descriptor maps on the 8x8-pixel cell grid.

Conventions used throughout the package:

* grid arrays are ``[h, w, ...]`` with ``h = H/8`` rows and ``w = W/8`` cols;
* cell ``(i, j)`` has pixel coordinates ``(8i + m, 8j + n)``: the first
  pixel coordinate ("x") runs along image rows, the second ("y") along
  columns, and channel ``c = 8m + n`` encodes the sub-cell offset;
* channel 64 (0-based) is the "no keypoint" dustbin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateDescriptorError, FormatError, ShapeError
from .formats import read_fgrd, write_fgrd

CELL = 8
KEYPOINT_CHANNELS = 65
DUSTBIN = 64
DESCRIPTOR_DIM = 256

# [64, 2] sub-cell offsets (m, n) of each keypoint channel
_OFFSETS = np.stack(np.divmod(np.arange(64), 8), axis=1).astype(np.float64)


@dataclass(frozen=True)
class FeatureGrid:
    raw_logits: ad.Tensor
    raw_descriptors: ad.Tensor
    keypoints: ad.Tensor  # K, softmax over all 65 channels
    descriptors: ad.Tensor  # D, unit L2 norm per cell
    image_h: int
    image_w: int

    @property
    def cells_h(self) -> int:
        return self.keypoints.shape[0]

    @property
    def cells_w(self) -> int:
        return self.keypoints.shape[1]

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[2]

    @property
    def confidence(self) -> ad.Tensor:
        """K'(i, j) = 1 - K(i, j, dustbin)."""
        return 1.0 - self.keypoints[:, :, DUSTBIN]


def normalize_grid(raw_logits, raw_descriptors, image_h: int | None = None,
                   image_w: int | None = None) -> FeatureGrid:
    raw_logits = ad.as_tensor(raw_logits)
    raw_descriptors = ad.as_tensor(raw_descriptors)
    if raw_logits.ndim != 3 or raw_logits.shape[2] != KEYPOINT_CHANNELS:
        raise ShapeError(f"keypoint logits must be [h, w, 65], got {raw_logits.shape}")
    h, w = raw_logits.shape[:2]
    if raw_descriptors.ndim != 3 or raw_descriptors.shape[:2] != (h, w):
        raise ShapeError(f"descriptors {raw_descriptors.shape} do not match grid {h}x{w}")
    image_h = CELL * h if image_h is None else image_h
    image_w = CELL * w if image_w is None else image_w
    if (image_h, image_w) != (CELL * h, CELL * w):
        raise ShapeError(f"image {image_h}x{image_w} inconsistent with grid {h}x{w}")
    sq = ad.reduce("sum", ad.mul(raw_descriptors, raw_descriptors), axes=2)
    if (sq.data < 1e-24).any():
        raise DegenerateDescriptorError("descriptor fiber with zero norm")
    norm = ad.sqrt(sq)
    dim = raw_descriptors.shape[2]
    unit = ad.div(raw_descriptors, ad.broadcast_to(ad.reshape(norm, (h, w, 1)), (h, w, dim)))
    keypoints = ad.softmax_axis(raw_logits, axis=2)
    return FeatureGrid(raw_logits, raw_descriptors, keypoints, unit, image_h, image_w)


def softargmax_cell_coords(grid: FeatureGrid) -> ad.Tensor:
    """Expected keypoint pixel ``kp(i, j)`` per cell, shape [h, w, 2].

    The position distribution is the first 64 channels renormalized, which
    equals a softmax of the raw logits over those channels.
    """
    h, w = grid.cells_h, grid.cells_w
    s = ad.softmax_axis(grid.raw_logits, axis=2, channel_range=(0, 64))
    offsets = ad.einsum("ijc,cd->ijd", s, ad.constant(_OFFSETS))
    return ad.add(offsets, ad.constant(cell_origins(h, w)))


def cell_origins(h: int, w: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return CELL * np.stack([ii, jj], axis=-1).astype(np.float64)


def argmax_detections(grid: FeatureGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hard detections: ``(channel[h,w], pixel[h,w,2], confidence[h,w])``.

    ``channel`` is the argmax over all 65 channels; ``pixel`` is the integer
    position of that channel (meaningless where ``channel == DUSTBIN``).
    """
    k = grid.keypoints.data
    ch = k.argmax(axis=2)
    off = _OFFSETS[np.minimum(ch, 63)]
    pix = cell_origins(grid.cells_h, grid.cells_w) + off
    return ch, pix, 1.0 - k[:, :, DUSTBIN]


class KeypointHead:
    """Learnable recalibration of externally computed feature maps.

    Stands in for the trainable keypoint/descriptor decoders: a per-channel
    affine map on the keypoint logits and a linear map on descriptors, both
    initialized to the identity.
    """

    def __init__(self, descriptor_dim: int = DESCRIPTOR_DIM):
        self.gain = ad.parameter(np.ones(KEYPOINT_CHANNELS), name="kp_gain")
        self.bias = ad.parameter(np.zeros(KEYPOINT_CHANNELS), name="kp_bias")
        self.projection = ad.parameter(np.eye(descriptor_dim), name="desc_proj")

    @property
    def parameters(self) -> dict[str, ad.Tensor]:
        return {"kp_gain": self.gain, "kp_bias": self.bias, "desc_proj": self.projection}

    def __call__(self, raw_logits: np.ndarray, raw_descriptors: np.ndarray) -> FeatureGrid:
        logits = ad.constant(raw_logits)
        h, w, c = logits.shape
        scaled = ad.add(ad.mul(logits, ad.broadcast_to(self.gain, (h, w, c))),
                        ad.broadcast_to(self.bias, (h, w, c)))
        desc = ad.einsum("ijd,de->ije", ad.constant(raw_descriptors), self.projection)
        return normalize_grid(scaled, desc)


def save_feature_grid(grid: FeatureGrid, path) -> None:
    write_fgrd(path, grid.image_h, grid.image_w, grid.raw_logits.data, grid.raw_descriptors.data)


def load_feature_grid(path) -> FeatureGrid:
    image_h, image_w, logits, desc = read_fgrd(path)
    try:
        return normalize_grid(logits, desc, image_h, image_w)
    except (ShapeError, DegenerateDescriptorError) as exc:
        raise FormatError(f"{path}: {exc}") from None
