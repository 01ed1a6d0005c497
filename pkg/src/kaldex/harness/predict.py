"""Whole-image inference by overlapping patches and weighted stitching."""

from __future__ import annotations

import numpy as np
import torch

from ..backbone import UNetPlusPlus
from ..metrics import THRESHOLD, binarize
from ..tiling import extract_patches, stitch


@torch.no_grad()
def predict(model: UNetPlusPlus, image: np.ndarray, stride: int | None = None,
            batch: int = 32, threshold: float = THRESHOLD) -> tuple[np.ndarray, np.ndarray]:
    """Probability map and binary mask for one normalized 2-D image."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    size = model.config.patch_size
    stride = stride or size // 2
    patches, grid = extract_patches(image, size, stride)
    stack = np.stack([p for p, _ in patches])[:, None]
    model.eval()
    probs = [model(torch.from_numpy(stack[i:i + batch])).numpy()[:, 0]
             for i in range(0, len(stack), batch)]
    probs = np.concatenate(probs)
    prob = stitch([(p, o) for p, (_, o) in zip(probs, patches)], grid.weight_map,
                  image.shape, grid.padded_shape)
    return prob, binarize(prob, threshold)


def predict_many(model: UNetPlusPlus, images, **kwargs) -> list[tuple[np.ndarray, np.ndarray]]:
    return [predict(model, im, **kwargs) for im in images]
