"""Overlapping patch extraction and center-weighted stitching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def make_weight_map(size: int) -> np.ndarray:
    """``1 / sqrt((W/2 - i)^2 + (W/2 - j)^2 + 1)`` for ``0 <= i, j < W``.

    ``W/2`` uses integer division, so for even ``W`` the peak sits at
    ``(W//2, W//2)``.
    """
    if size < 2:
        raise ValueError(f"patch size must be >= 2, got {size}")
    center = size // 2
    i = np.arange(size, dtype=np.float64)
    di = (center - i)[:, None]
    dj = (center - i)[None, :]
    return 1.0 / np.sqrt(di ** 2 + dj ** 2 + 1.0)


def _padded_length(n: int, size: int, stride: int) -> int:
    if n <= size:
        return size
    steps = -(-(n - size) // stride)
    return size + steps * stride


@dataclass
class PatchGrid:
    size: int = 48
    stride: int = 24
    image_shape: tuple[int, int] = (0, 0)
    padded_shape: tuple[int, int] = (0, 0)
    origins: list[tuple[int, int]] = field(default_factory=list)

    @property
    def pad(self) -> tuple[int, int]:
        return (self.padded_shape[0] - self.image_shape[0],
                self.padded_shape[1] - self.image_shape[1])

    @property
    def weight_map(self) -> np.ndarray:
        return make_weight_map(self.size)


def plan_grid(shape: tuple[int, int], size: int = 48, stride: int = 24) -> PatchGrid:
    if size < stride:
        raise ValueError(f"patch size {size} must not be smaller than stride {stride}")
    if stride < 1:
        raise ValueError("stride must be positive")
    h, w = shape
    if h < 1 or w < 1:
        raise ValueError("image must be at least 1x1")
    ph, pw = _padded_length(h, size, stride), _padded_length(w, size, stride)
    origins = [(r, c) for r in range(0, ph - size + 1, stride)
               for c in range(0, pw - size + 1, stride)]
    return PatchGrid(size, stride, (h, w), (ph, pw), origins)


def pad_image(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Reflect-pad on the bottom/right edges to the grid's canvas."""
    dh, dw = grid.pad
    widths = [(0, dh), (0, dw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, widths, mode="reflect")


def extract_patches(image: np.ndarray, size: int = 48, stride: int = 24):
    """Cut a 2-D (or H x W x ...) image into overlapping windows.

    Returns ``(patches, grid)`` where ``patches`` is a list of
    ``(patch, (row, col))`` with origins in padded coordinates.
    """
    image = np.asarray(image)
    grid = plan_grid(image.shape[:2], size, stride)
    canvas = pad_image(image, grid)
    patches = [(canvas[r:r + size, c:c + size], (r, c)) for r, c in grid.origins]
    return patches, grid


def stitch(patches, weight_map: np.ndarray, out_shape: tuple[int, int],
           padded_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Weighted average of overlapping patches, cropped to ``out_shape``.

    Uses an incremental weighted mean so that pixels where every patch
    agrees are reproduced exactly.
    """
    size = weight_map.shape[0]
    if padded_shape is None:
        rows = max(r for _, (r, _) in patches) + size
        cols = max(c for _, (_, c) in patches) + size
        padded_shape = (rows, cols)
    mean = np.zeros(padded_shape, dtype=np.float64)
    total = np.zeros(padded_shape, dtype=np.float64)
    for patch, (r, c) in patches:
        if r < 0 or c < 0 or r + size > padded_shape[0] or c + size > padded_shape[1]:
            raise ValueError(f"patch origin {(r, c)} lies outside the canvas {padded_shape}")
        win = (slice(r, r + size), slice(c, c + size))
        total[win] += weight_map
        mean[win] += (weight_map / total[win]) * (np.asarray(patch, dtype=np.float64) - mean[win])
    out = mean[:out_shape[0], :out_shape[1]]
    if (total[:out_shape[0], :out_shape[1]] == 0).any():
        raise RuntimeError("stitching left uncovered pixels")
    return out
