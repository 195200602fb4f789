"""Binary container formats: TNSR tensors, FGRD feature grids, DMAP depth maps.

All integers are little-endian u32, tensor payloads little-endian f64 and
depth payloads little-endian f32, row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import FormatError

TNSR_MAGIC = b"TNSR"
FGRD_MAGIC = b"FGRD"
DMAP_MAGIC = b"DMAP"
VERSION = 1


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_u32(fh: BinaryIO, count: int = 1) -> tuple[int, ...]:
    return struct.unpack(f"<{count}I", _read_exact(fh, 4 * count))


def _check_header(fh: BinaryIO, magic: bytes) -> None:
    got = _read_exact(fh, 4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = _read_u32(fh)
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")


def write_tnsr_block(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array, dtype="<f8")
    fh.write(TNSR_MAGIC)
    fh.write(struct.pack("<II", VERSION, array.ndim))
    if array.ndim:
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array).tobytes())


def read_tnsr_block(fh: BinaryIO) -> np.ndarray:
    _check_header(fh, TNSR_MAGIC)
    (rank,) = _read_u32(fh)
    dims = _read_u32(fh, rank) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def save_tnsr(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tnsr_block(fh, array)


def load_tnsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tnsr_block(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
    return arr


def write_fgrd(path, image_h: int, image_w: int, logits: np.ndarray, descriptors: np.ndarray) -> None:
    h, w = logits.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FGRD_MAGIC)
        fh.write(struct.pack("<5I", VERSION, image_h, image_w, h, w))
        write_tnsr_block(fh, logits)
        write_tnsr_block(fh, descriptors)


def read_fgrd(path) -> tuple[int, int, np.ndarray, np.ndarray]:
    """Returns ``(image_h, image_w, raw_logits, raw_descriptors)``."""
    with open(path, "rb") as fh:
        _check_header(fh, FGRD_MAGIC)
        image_h, image_w, h, w = _read_u32(fh, 4)
        logits = read_tnsr_block(fh)
        desc = read_tnsr_block(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    if image_h % 8 or image_w % 8:
        raise FormatError(f"image size {image_h}x{image_w} not divisible by 8")
    if (h, w) != (image_h // 8, image_w // 8):
        raise FormatError(f"grid {h}x{w} inconsistent with image {image_h}x{image_w}")
    if logits.shape != (h, w, 65) or desc.ndim != 3 or desc.shape[:2] != (h, w):
        raise FormatError(f"block shapes {logits.shape}, {desc.shape} do not match grid {h}x{w}")
    return image_h, image_w, logits, desc


def write_dmap(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth)
    with open(path, "wb") as fh:
        fh.write(DMAP_MAGIC)
        fh.write(struct.pack("<3I", VERSION, *depth.shape))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_header(fh, DMAP_MAGIC)
        rows, cols = _read_u32(fh, 2)
        payload = _read_exact(fh, 4 * rows * cols)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
