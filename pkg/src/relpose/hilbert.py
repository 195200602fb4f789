"""Pseudo-Hilbert raveling of an arbitrary ``rows x cols`` cell grid.

The curve is built by recursive subdivision (generalized Hilbert): a block
is walked along its major axis, halved along the longer side when it is
elongated, and otherwise split into three sub-blocks whose entry/exit
corners are stitched so every step moves to a 4-neighbour.  A walk from a
corner to the adjacent corner along an odd major axis of a block with an
even minor axis is impossible on a bipartite grid, so the top-level
orientation is chosen to avoid that case.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ShapeError


def _sgn(v: int) -> int:
    return (v > 0) - (v < 0)


@lru_cache(maxsize=None)
def _block(ax: int, ay: int, bx: int, by: int) -> np.ndarray:
    # cell offsets visited in a block; (ax, ay) spans the major axis, (bx, by) the minor one
    w = abs(ax + ay)
    h = abs(bx + by)
    dax, day = _sgn(ax), _sgn(ay)
    dbx, dby = _sgn(bx), _sgn(by)
    if h == 1:
        return np.arange(w)[:, None] * np.array([dax, day])
    if w == 1:
        return np.arange(h)[:, None] * np.array([dbx, dby])
    ax2, ay2 = ax // 2, ay // 2
    bx2, by2 = bx // 2, by // 2
    w2 = abs(ax2 + ay2)
    h2 = abs(bx2 + by2)
    if 2 * w > 3 * h:
        if w2 % 2 and w > 2:
            ax2, ay2 = ax2 + dax, ay2 + day
        return np.concatenate([_block(ax2, ay2, bx, by),
                               _block(ax - ax2, ay - ay2, bx, by) + (ax2, ay2)])
    if h2 % 2 and h > 2:
        bx2, by2 = bx2 + dbx, by2 + dby
    return np.concatenate([
        _block(bx2, by2, ax2, ay2),
        _block(ax, ay, bx - bx2, by - by2) + (bx2, by2),
        _block(-bx2, -by2, -(ax - ax2), -(ay - ay2)) + ((ax - dax) + (bx2 - dbx), (ay - day) + (by2 - dby)),
    ])


def _unit_steps(path: np.ndarray) -> bool:
    return bool(np.all(np.abs(np.diff(path, axis=0)).sum(axis=1) == 1))


@lru_cache(maxsize=None)
def _curve(rows: int, cols: int) -> np.ndarray:
    attempts = [(rows, 0, 0, cols), (0, cols, rows, 0)]
    if cols > rows:
        attempts.reverse()
    for ax, ay, bx, by in attempts:
        path = _block(ax, ay, bx, by)
        if _unit_steps(path):
            return path.astype(np.int64)
    # unreachable for grids up to 64x64 (checked exhaustively in tests);
    # kept as a safety net for larger grids
    return np.array(_snake(rows, cols), dtype=np.int64)


def _snake(rows: int, cols: int) -> list:
    return [(i, j if i % 2 == 0 else cols - 1 - j) for i in range(rows) for j in range(cols)]


@dataclass(frozen=True)
class HilbertMap:
    """Bijection between cells ``(i, j)`` and curve positions ``k``."""

    rows: int
    cols: int
    forward: np.ndarray = field(repr=False)  # [rows, cols] -> k
    inverse: np.ndarray = field(repr=False)  # [rows*cols, 2] -> (i, j)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def flat_order(self) -> np.ndarray:
        """Row-major flat cell index visited at each curve position."""
        return self.inverse[:, 0] * self.cols + self.inverse[:, 1]

    def __call__(self, i: int, j: int) -> int:
        return int(self.forward[i, j])

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["k", "i", "j"])
            for k, (i, j) in enumerate(self.inverse):
                writer.writerow([k, int(i), int(j)])

    @classmethod
    def from_csv(cls, path) -> "HilbertMap":
        with open(path, newline="") as fh:
            rows_ = list(csv.DictReader(fh))
        inverse = np.array([[int(r["i"]), int(r["j"])] for r in rows_], dtype=np.int64)
        ks = np.array([int(r["k"]) for r in rows_])
        if not np.array_equal(ks, np.arange(len(ks))):
            raise ShapeError("curve dump must list k = 0..n-1 in order")
        rows, cols = int(inverse[:, 0].max()) + 1, int(inverse[:, 1].max()) + 1
        return cls._from_inverse(rows, cols, inverse)

    @classmethod
    def _from_inverse(cls, rows: int, cols: int, inverse: np.ndarray) -> "HilbertMap":
        forward = np.full((rows, cols), -1, dtype=np.int64)
        forward[inverse[:, 0], inverse[:, 1]] = np.arange(len(inverse))
        if (forward < 0).any() or len(inverse) != rows * cols:
            raise ShapeError("curve is not a bijection on the grid")
        forward.setflags(write=False)
        inverse.setflags(write=False)
        return cls(rows, cols, forward, inverse)


def build_pseudo_hilbert(rows: int, cols: int) -> HilbertMap:
    if rows < 1 or cols < 1:
        raise DimensionError(f"grid dims must be positive, got {rows}x{cols}")
    inverse = _curve(int(rows), int(cols)).copy()
    return HilbertMap._from_inverse(rows, cols, inverse)


def row_major_map(rows: int, cols: int) -> HilbertMap:
    """Line-by-line raveling, the baseline the curve is compared against."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"grid dims must be positive, got {rows}x{cols}")
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    inverse = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.int64)
    return HilbertMap._from_inverse(rows, cols, inverse)


def locality_score(hmap: HilbertMap) -> float:
    """Mean |k(a) - k(b)| over all 4-neighbour cell pairs (0 for a single cell)."""
    f = hmap.forward
    diffs = [np.abs(np.diff(f, axis=0)).ravel(), np.abs(np.diff(f, axis=1)).ravel()]
    allv = np.concatenate(diffs)
    return float(allv.mean()) if allv.size else 0.0


def ravel_volume(c4: ad.Tensor, hmap: HilbertMap) -> ad.Tensor:
    """[h, w, h, w] scores -> [h, w, h*w + 1] with a trailing zero dustbin channel."""
    h, w = hmap.rows, hmap.cols
    if c4.shape != (h, w, h, w):
        raise ShapeError(f"volume {c4.shape} does not match curve grid {h}x{w}")
    flat = ad.reshape(c4, (h, w, h * w))
    ordered = ad.take(flat, hmap.flat_order, axis=2)
    zeros = ad.constant(np.zeros((h, w, 1)))
    return ad.concat([ordered, zeros], axis=2)


def unravel_volume(c3: ad.Tensor, hmap: HilbertMap) -> ad.Tensor:
    """Inverse of :func:`ravel_volume` (the dustbin channel is dropped)."""
    h, w = hmap.rows, hmap.cols
    if c3.shape != (h, w, h * w + 1):
        raise ShapeError(f"volume {c3.shape} does not match curve grid {h}x{w}")
    by_k = ad.take(c3, np.arange(h * w), axis=2)
    back = ad.take(by_k, hmap.forward.reshape(-1), axis=2)
    return ad.reshape(back, (h, w, h, w))
