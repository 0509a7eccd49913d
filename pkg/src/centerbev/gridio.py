"""Shared on-disk format for 2D feature maps.

One ASCII header line ``H W C f32`` followed by the row-major little-endian
float32 payload. Every map the package writes (BEV features, heatmaps,
regression targets, debug dumps) uses this format.
"""

from __future__ import annotations

import os

import numpy as np

_MAGIC = b"f32"


class GridFormatError(ValueError):
    pass


def dump_grid(path: str | os.PathLike, grid: np.ndarray) -> None:
    """Write a (H, W) or (H, W, C) float array."""
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise GridFormatError(f"expected a 2D or 3D array, got ndim={arr.ndim}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(f"{h} {w} {c} f32\n".encode("ascii"))
        f.write(arr.astype("<f4").tobytes(order="C"))


def load_grid(path: str | os.PathLike) -> np.ndarray:
    """Read a map written by :func:`dump_grid`; returns float64 (H, W, C)."""
    with open(path, "rb") as f:
        header = f.readline().strip().split()
        if len(header) != 4 or header[3] != _MAGIC:
            raise GridFormatError(f"{path}: bad header {header!r}")
        try:
            h, w, c = (int(t) for t in header[:3])
        except ValueError as e:
            raise GridFormatError(f"{path}: non-integer dims in header") from e
        payload = f.read()
    expected = h * w * c * 4
    if len(payload) != expected:
        raise GridFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, c)
