"""Joint flips and smoothed additive noise for training patches."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


KERNEL_5 = gaussian_kernel(5, 1.0)


def augment(patch, mask, seed, sigma: float = 0.05, mode: str = "smoothed", flip: bool = True):
    """Randomly flip ``patch`` and ``mask`` together and perturb the patch.

    ``seed`` may be an int or a ``numpy.random.Generator``. In ``smoothed``
    mode white noise of std ``sigma`` is filtered by a 5x5 Gaussian kernel
    and added to the image. In ``blur`` mode the image itself is filtered by
    that kernel on a fair coin flip (skipped when ``sigma == 0``).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    patch = np.asarray(patch, dtype=np.float32)
    mask = np.asarray(mask)
    flip_h, flip_v = rng.random() < 0.5, rng.random() < 0.5
    if flip and flip_h:
        patch, mask = patch[..., :, ::-1], mask[..., :, ::-1]
    if flip and flip_v:
        patch, mask = patch[..., ::-1, :], mask[..., ::-1, :]
    patch = np.ascontiguousarray(patch)
    mask = np.ascontiguousarray(mask)
    if sigma > 0:
        if mode == "smoothed":
            noise = rng.normal(0.0, sigma, patch.shape[-2:])
            patch = patch + ndimage.convolve(noise, KERNEL_5, mode="reflect").astype(np.float32)
        elif mode == "blur":
            if rng.random() < 0.5:
                patch = ndimage.convolve(patch.astype(np.float64), _kernel_nd(patch.ndim),
                                         mode="reflect").astype(np.float32)
        else:
            raise ValueError(f"unknown noise mode {mode!r}")
    return patch, mask


def _kernel_nd(ndim: int) -> np.ndarray:
    return KERNEL_5.reshape((1,) * (ndim - 2) + KERNEL_5.shape)
