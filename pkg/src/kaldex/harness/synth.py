"""Synthetic curvilinear phantoms with exact vessel masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

EDGE_BLUR = 0.5  # pixels


@dataclass
class Phantom:
    image: np.ndarray   # float32 in [0, 1]
    mask: np.ndarray    # uint8 {0, 1}
    widths: tuple[float, ...]


def _spline_curve(rng: np.random.Generator, start: np.ndarray, heading: float,
                  length: float, size: int) -> np.ndarray:
    """Densely sampled composite cubic spline from a smooth random walk."""
    n_ctrl = rng.integers(4, 7)
    step = length / (n_ctrl - 1)
    pts = [start]
    for _ in range(n_ctrl - 1):
        heading += rng.normal(0, 0.5)
        pts.append(pts[-1] + step * np.array([np.sin(heading), np.cos(heading)]))
    pts = np.asarray(pts)
    t = np.arange(len(pts), dtype=float)
    spline = CubicSpline(t, pts, axis=0)
    arc = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
    dense = spline(np.linspace(0, t[-1], max(int(arc * 4), 8)))
    keep = (dense >= -2).all(1) & (dense <= size + 1).all(1)
    return dense[keep]


def _phantom(rng: np.random.Generator, size: int) -> Phantom:
    yy, xx = np.mgrid[0:size, 0:size]
    pixels = np.stack([yy.ravel(), xx.ravel()], 1).astype(float)
    n_curves = int(rng.integers(4, 8))
    widths = [1.0] + [float(rng.choice([1, 2, 3, 4], p=[0.3, 0.3, 0.25, 0.15]))
                      for _ in range(n_curves - 1)]
    widths.sort(reverse=True)
    curves = []
    signal = np.zeros(size * size)
    mask = np.zeros(size * size, dtype=bool)
    for k, width in enumerate(widths):
        if curves and rng.random() < 0.7:
            parent = curves[rng.integers(len(curves))]
            start = parent[rng.integers(len(parent))]
        else:
            start = rng.uniform(0.1 * size, 0.9 * size, 2)
        curve = _spline_curve(rng, start, rng.uniform(0, 2 * np.pi),
                              rng.uniform(0.5, 1.2) * size, size)
        if len(curve) < 2:
            continue
        curves.append(curve)
        dist, nearest = cKDTree(curve).query(pixels)
        radius = width / 2
        contrast = rng.uniform(0.45, 0.9)
        # slow fade of contrast along the curve
        fade = 1 - 0.35 * np.sin(np.linspace(0, np.pi * rng.uniform(0.5, 2), len(curve))) ** 2
        # flat core with a fixed half-pixel blur at the edge
        profile = contrast * fade[nearest] * np.exp(-0.5 * (np.maximum(dist - radius, 0) / EDGE_BLUR) ** 2)
        signal = np.maximum(signal, profile)
        mask |= dist <= radius + 0.25
    background = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 10)
    background = 0.2 + 0.12 * background / (background.std() + 1e-12)
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 1.5)
    texture = 0.04 * texture / (texture.std() + 1e-12)
    image = background + texture + signal.reshape(size, size) + rng.normal(0, 0.03, (size, size))
    return Phantom(np.clip(image, 0, 1).astype(np.float32),
                   mask.reshape(size, size).astype(np.uint8), tuple(widths))


def synth_generate(n: int, size: int = 128, seed: int = 0) -> list[Phantom]:
    """``n`` random vessel-like phantoms; identical for identical arguments.

    Every phantom contains at least one 1-pixel-wide curve.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        ph = _phantom(rng, size)
        if 1.0 in ph.widths and ph.mask.any():
            out.append(ph)
    return out
