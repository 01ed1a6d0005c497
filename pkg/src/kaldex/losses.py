"""Soft clDice and the clDice/BCE training objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

BCE_EPS = 1e-7
DEFAULT_SKELETON_ITERS = 5


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def _as_4d(x: torch.Tensor) -> tuple[torch.Tensor, int]:
    dims = x.dim()
    if dims == 2:
        return x[None, None], dims
    if dims == 3:
        return x[:, None], dims
    if dims == 4:
        return x, dims
    raise ValueError(f"expected a 2-D, 3-D or 4-D map, got shape {tuple(x.shape)}")


def _restore(x: torch.Tensor, dims: int) -> torch.Tensor:
    if dims == 2:
        return x[0, 0]
    if dims == 3:
        return x[:, 0]
    return x


def soft_erode(img: torch.Tensor) -> torch.Tensor:
    p1 = -F.max_pool2d(-img, (3, 1), (1, 1), (1, 0))
    p2 = -F.max_pool2d(-img, (1, 3), (1, 1), (0, 1))
    return torch.min(p1, p2)


def soft_dilate(img: torch.Tensor) -> torch.Tensor:
    return F.max_pool2d(img, (3, 3), (1, 1), (1, 1))


def soft_open(img: torch.Tensor) -> torch.Tensor:
    return soft_dilate(soft_erode(img))


def soft_skeleton(mask: torch.Tensor, iterations: int = DEFAULT_SKELETON_ITERS) -> torch.Tensor:
    """Differentiable skeleton by iterated soft erosion and opening.

    The result is clipped to the input so it never exceeds the mask.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    img, dims = _as_4d(mask)
    skel = F.relu(img - soft_open(img))
    cur = img
    for _ in range(iterations):
        cur = soft_erode(cur)
        delta = F.relu(cur - soft_open(cur))
        skel = skel + F.relu(delta - skel * delta)
    skel = torch.minimum(skel, img)
    return _restore(skel, dims)


def _cl_dice_from_skeletons(v_p, v_l, s_p, s_l):
    """Per-sample clDice for (B, ...) tensors with the empty-skeleton policy."""
    b = v_p.shape[0]
    v_p, v_l = v_p.reshape(b, -1), v_l.reshape(b, -1)
    s_p, s_l = s_p.reshape(b, -1), s_l.reshape(b, -1)
    sp_mass = s_p.sum(1)
    sl_mass = s_l.sum(1)
    zero = torch.zeros_like(sp_mass)
    tprec = torch.where(sp_mass > 0, (s_p * v_l).sum(1) / torch.where(sp_mass > 0, sp_mass, 1), zero)
    tsens = torch.where(sl_mass > 0, (s_l * v_p).sum(1) / torch.where(sl_mass > 0, sl_mass, 1), zero)
    denom = tprec + tsens
    score = torch.where(denom > 0, 2 * tprec * tsens / torch.where(denom > 0, denom, 1), zero)
    both_empty = (v_p.sum(1) == 0) & (v_l.sum(1) == 0)
    return torch.where(both_empty, torch.ones_like(score), score)


def cl_dice_per_sample(v_p: torch.Tensor, v_l: torch.Tensor,
                       iterations: int = DEFAULT_SKELETON_ITERS) -> torch.Tensor:
    if v_p.shape != v_l.shape:
        raise ValueError(f"shape mismatch: {tuple(v_p.shape)} vs {tuple(v_l.shape)}")
    p4, _ = _as_4d(v_p)
    l4, _ = _as_4d(v_l.to(v_p.dtype))
    return _cl_dice_from_skeletons(p4, l4, soft_skeleton(p4, iterations), soft_skeleton(l4, iterations))


def cl_dice(v_p: torch.Tensor, v_l: torch.Tensor, iterations: int = DEFAULT_SKELETON_ITERS) -> torch.Tensor:
    """Soft clDice, averaged over the batch when inputs are batched.

    Tprec = |S_P * V_L| / |S_P|, Tsens = |S_L * V_P| / |S_L| and clDice is
    their harmonic mean. A zero skeleton mass makes its ratio 0; two empty
    masks score 1.
    """
    return cl_dice_per_sample(v_p, v_l, iterations).mean()


def bce(v_p: torch.Tensor, v_l: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    p = v_p.clamp(eps, 1 - eps)
    v_l = v_l.to(p.dtype)
    return -(v_l * torch.log(p) + (1 - v_l) * torch.log1p(-p)).mean()


def training_loss(v_p: torch.Tensor, v_l: torch.Tensor, weights: LossWeights = LossWeights(),
                  iterations: int = DEFAULT_SKELETON_ITERS) -> torch.Tensor:
    """``alpha * (1 - clDice) + (1 - alpha) * BCE``."""
    alpha = weights.alpha
    loss_bce = bce(v_p, v_l)
    if alpha == 0:
        return loss_bce
    return alpha * (1 - cl_dice(v_p, v_l, iterations)) + (1 - alpha) * loss_bce
