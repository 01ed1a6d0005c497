"""0-dimensional persistent homology of images and the diagram-distance loss.

Diagrams come from the superlevel-set filtration: thresholds sweep from the
image maximum downwards, pixels join in that order and 4-connected pixels are
merged. A component is born at its highest value; when two components meet
the younger one (lower birth) dies at the current value. The component that
survives to the end dies at the global minimum, so every point is finite.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .losses import bce

log = logging.getLogger(__name__)


@dataclass
class PersistenceDiagram:
    """Birth/death pairs plus the flat pixel indices that realise them."""

    points: np.ndarray            # (n, 2) float: birth, death
    birth_index: np.ndarray       # (n,) int
    death_index: np.ndarray       # (n,) int

    def __len__(self) -> int:
        return len(self.points)

    def sorted_points(self) -> list[tuple[float, float]]:
        return sorted(map(tuple, self.points.tolist()), reverse=True)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["birth", "death"])
            writer.writerows(self.points.tolist())

    @classmethod
    def from_csv(cls, path) -> "PersistenceDiagram":
        rows = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        rows = rows.reshape(-1, 2)
        idx = np.full(len(rows), -1)
        return cls(rows, idx, idx.copy())


def _find(parent: list[int], i: int) -> int:
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def compute_diagram(image) -> PersistenceDiagram:
    """Persistence diagram of 0-dimensional features (connected components).

    Zero-persistence pairs, which only arise from the processing order inside
    a plateau, are dropped; the essential class is always kept.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    h, w = img.shape
    flat = img.ravel()
    order = np.argsort(-flat, kind="stable")
    rank = np.empty(flat.size, dtype=np.int64)
    rank[order] = np.arange(flat.size)
    rank = rank.tolist()
    values = flat.tolist()
    parent = list(range(flat.size))
    birth_of = [-1] * flat.size      # root -> pixel index where it was born
    added = [False] * flat.size
    births, deaths = [], []
    for p in order.tolist():
        added[p] = True
        r, c = divmod(p, w)
        roots = set()
        if r > 0 and added[p - w]:
            roots.add(_find(parent, p - w))
        if r < h - 1 and added[p + w]:
            roots.add(_find(parent, p + w))
        if c > 0 and added[p - 1]:
            roots.add(_find(parent, p - 1))
        if c < w - 1 and added[p + 1]:
            roots.add(_find(parent, p + 1))
        if not roots:
            birth_of[p] = p
            continue
        # elder rule: the component born first in sweep order survives
        keep = min(roots, key=lambda q: rank[birth_of[q]])
        parent[p] = keep
        for q in roots:
            if q == keep:
                continue
            b = birth_of[q]
            if values[b] > values[p]:
                births.append(b)
                deaths.append(p)
            parent[q] = keep
    births.append(int(order[0]))
    deaths.append(int(order[-1]))
    b_idx = np.asarray(births, dtype=np.int64)
    d_idx = np.asarray(deaths, dtype=np.int64)
    pts = np.stack([flat[b_idx], flat[d_idx]], axis=1)
    return PersistenceDiagram(pts, b_idx, d_idx)


def _surrogate(other):
    """Diagonal point at the middle of the other diagram's value range."""
    lo, hi = other.min(), other.max()
    mid = (lo + hi) / 2
    if isinstance(other, torch.Tensor):
        return torch.stack([mid, mid]).reshape(1, 2)
    return np.array([[mid, mid]])


def _diagonal_gap(points):
    """Euclidean distance of each (birth, death) point to the line b = d."""
    gap = points[:, 0] - points[:, 1]
    return (gap.abs() if isinstance(gap, torch.Tensor) else np.abs(gap)) / np.sqrt(2.0)


def modified_hausdorff(pd_s, pd_gt, diagonal: bool = False):
    """Mean-of-minima Hausdorff distance between two diagrams.

    ``0.5 * (mean_a min_b |a - b| + mean_b min_a |b - a|)`` with Euclidean
    distances in the birth-death plane. Accepts :class:`PersistenceDiagram`,
    numpy arrays or torch tensors of shape (n, 2); torch inputs stay
    differentiable.

    With ``diagonal=True`` each diagram also contains the diagonal, as in the
    usual definition of a persistence diagram: a point may be matched to its
    projection onto ``b = d`` instead of a point of the other diagram. The
    means still run over the off-diagonal points only.
    """
    a = pd_s.points if isinstance(pd_s, PersistenceDiagram) else pd_s
    b = pd_gt.points if isinstance(pd_gt, PersistenceDiagram) else pd_gt
    use_torch = isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor)
    if use_torch:
        ref = a if isinstance(a, torch.Tensor) else b
        a = torch.as_tensor(a, dtype=ref.dtype).reshape(-1, 2)
        b = torch.as_tensor(b, dtype=ref.dtype).reshape(-1, 2)
    else:
        a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
        b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 and len(b) == 0:
        log.info("both diagrams empty; distance defined as 0")
        return a.sum() * 0 if use_torch else 0.0
    if len(a) == 0:
        log.info("empty prediction diagram replaced by a diagonal surrogate")
        a = _surrogate(b)
    elif len(b) == 0:
        log.info("empty reference diagram replaced by a diagonal surrogate")
        b = _surrogate(a)
    if use_torch:
        dist = torch.linalg.vector_norm(a[:, None, :] - b[None, :, :], dim=-1)
        near_a, near_b = dist.min(dim=1).values, dist.min(dim=0).values
        if diagonal:
            near_a = torch.minimum(near_a, _diagonal_gap(a))
            near_b = torch.minimum(near_b, _diagonal_gap(b))
        return 0.5 * (near_a.mean() + near_b.mean())
    dist = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    near_a, near_b = dist.min(axis=1), dist.min(axis=0)
    if diagonal:
        near_a = np.minimum(near_a, _diagonal_gap(a))
        near_b = np.minimum(near_b, _diagonal_gap(b))
    return 0.5 * (near_a.mean() + near_b.mean())


def diagram_points(image: torch.Tensor, diagram: PersistenceDiagram | None = None) -> torch.Tensor:
    """Diagram of a 2-D tensor as differentiable (n, 2) points.

    Each coordinate is read from its critical pixel, so gradients reach
    exactly the birth and death pixels.
    """
    if diagram is None:
        diagram = compute_diagram(image.detach().cpu().numpy())
    flat = image.reshape(-1)
    births = flat[torch.as_tensor(diagram.birth_index, device=flat.device)]
    deaths = flat[torch.as_tensor(diagram.death_index, device=flat.device)]
    return torch.stack([births, deaths], dim=1)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None]
    if x.dim() == 3:
        return x
    if x.dim() == 4 and x.shape[1] == 1:
        return x[:, 0]
    raise ValueError(f"expected (H, W), (B, H, W) or (B, 1, H, W), got {tuple(x.shape)}")


def topo_loss(prediction: torch.Tensor, ground_truth: torch.Tensor,
              diagonal: bool = True) -> torch.Tensor:
    """Diagram distance between prediction and ground truth, batch-averaged.

    ``diagonal`` (default on) lets low-persistence points of the prediction
    match the diagonal, so spurious components are flattened instead of
    being pulled up toward a ground-truth component. ``diagonal=False`` is
    the plain mean-of-minima distance.
    """
    if prediction.shape != ground_truth.shape:
        raise ValueError(
            f"shape mismatch: {tuple(prediction.shape)} vs {tuple(ground_truth.shape)}"
        )
    preds = _as_batch(prediction)
    gts = _as_batch(ground_truth)
    terms = []
    for pred, gt in zip(preds, gts):
        gt_points = torch.as_tensor(compute_diagram(gt.detach().cpu().numpy()).points,
                                    dtype=pred.dtype, device=pred.device)
        terms.append(modified_hausdorff(diagram_points(pred), gt_points, diagonal))
    return torch.stack(terms).mean()


def finetune_loss(prediction: torch.Tensor, ground_truth: torch.Tensor,
                  topo_subset=None, diagonal: bool = True) -> torch.Tensor:
    """``Loss_tp + BCE`` for the fine-tuning phase (no blend weight).

    ``topo_subset`` optionally restricts the diagram term to some batch
    items; BCE always covers the whole batch.
    """
    loss = bce(prediction, ground_truth)
    if topo_subset is None:
        return topo_loss(prediction, ground_truth, diagonal) + loss
    if len(topo_subset) == 0:
        return loss
    idx = torch.as_tensor(topo_subset, dtype=torch.long)
    return topo_loss(prediction[idx], ground_truth[idx], diagonal) + loss


def count_components(mask) -> int:
    """Number of 4-connected foreground components of a binary mask."""
    _, n = ndimage.label(np.asarray(mask) > 0)
    return int(n)
