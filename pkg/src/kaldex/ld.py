"""Linear deformable (LD) convolution block.

Three parallel branches read the same input:

* base: two padded 3x3 convolutions;
* horizontal: offset conv -> bounded offsets -> Kalman smoothing ->
  interpolation -> 1xL convolution;
* vertical: the same with an Lx1 convolution and row-wise offsets.

Branch outputs are concatenated and fused by a 1x1 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .sampling import (
    HORIZONTAL,
    VERTICAL,
    OffsetField,
    kalman_accumulate,
    sample_along_axis,
    tap_displacements,
)

N_BRANCHES = 3


@dataclass(frozen=True)
class LDConfig:
    in_channels: int
    out_channels: int
    kernel_length: int = 9
    r: float = 0.01
    offset_extent: float = 2.0

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel_length < 3 or self.kernel_length % 2 == 0:
            raise ValueError(f"kernel_length must be odd and >= 3, got {self.kernel_length}")
        if self.out_channels % N_BRANCHES:
            raise ValueError(
                f"out_channels ({self.out_channels}) must be divisible by {N_BRANCHES}"
            )
        if not self.r > 0:
            raise ValueError("r must be positive")
        if not self.offset_extent > 0:
            raise ValueError("offset_extent must be positive")

    @property
    def arm(self) -> int:
        return (self.kernel_length - 1) // 2


def conv_norm_relu(in_ch: int, out_ch: int, kernel_size=3, padding=1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size, padding=padding),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.ReLU(inplace=True),
    )


class OffsetPredictor(nn.Module):
    """Predicts ``kernel_length - 1`` bounded offsets per pixel for one axis.

    The convolution starts at zero so the block begins as a rigid 1-D
    convolution, as in DCN practice.
    """

    def __init__(self, in_channels: int, kernel_length: int = 9, r: float = 0.01,
                 offset_extent: float = 2.0):
        super().__init__()
        self.arm = (kernel_length - 1) // 2
        self.r = r
        self.offset_extent = offset_extent
        self.conv = nn.Conv2d(in_channels, kernel_length - 1, 3, padding=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def bound(self, pre: torch.Tensor) -> torch.Tensor:
        return self.offset_extent * torch.tanh(pre)

    def forward(self, x: torch.Tensor) -> OffsetField:
        raw = self.bound(self.conv(x))
        pos = kalman_accumulate(raw[:, :self.arm], self.r, dim=1)
        neg = kalman_accumulate(raw[:, self.arm:], self.r, dim=1)
        return OffsetField(raw=raw, smoothed=torch.cat([pos, neg], dim=1))


class LinearDeformableConv(nn.Module):
    """One deformable branch: offsets, sampling and the 1-D linear convolution.

    With all offsets zero this is exactly a replicate-padded 1xL (horizontal)
    or Lx1 (vertical) convolution.
    """

    def __init__(self, in_channels: int, out_channels: int, orientation: str,
                 kernel_length: int = 9, r: float = 0.01, offset_extent: float = 2.0):
        super().__init__()
        if orientation not in (HORIZONTAL, VERTICAL):
            raise ValueError(f"unknown orientation {orientation!r}")
        self.orientation = orientation
        self.kernel_length = kernel_length
        self.offsets = OffsetPredictor(in_channels, kernel_length, r, offset_extent)
        shape = (1, kernel_length) if orientation == HORIZONTAL else (kernel_length, 1)
        self.conv = nn.Conv2d(in_channels, out_channels, shape, stride=shape)

    def rigid_weight(self) -> torch.Tensor:
        return self.conv.weight

    def sample(self, x: torch.Tensor, field: OffsetField) -> torch.Tensor:
        disp = tap_displacements(field.smoothed, self.offsets.arm)
        return sample_along_axis(x, disp, self.orientation)

    def forward(self, x: torch.Tensor, return_offsets: bool = False):
        field = self.offsets(x)
        taps = self.sample(x, field)
        if self.orientation == VERTICAL:
            taps = taps.transpose(-1, -2)
        out = apply_taps(taps, self.conv.weight, self.conv.bias)
        if return_offsets:
            return out, field
        return out


class LDBlock(nn.Module):
    """Base, horizontal and vertical branches fused by a 1x1 convolution."""

    def __init__(self, config: LDConfig):
        super().__init__()
        self.config = config
        width = config.out_channels // N_BRANCHES
        self.base = nn.Sequential(
            conv_norm_relu(config.in_channels, width),
            conv_norm_relu(width, width),
        )
        kw = dict(kernel_length=config.kernel_length, r=config.r,
                  offset_extent=config.offset_extent)
        self.horizontal = LinearDeformableConv(config.in_channels, width, HORIZONTAL, **kw)
        self.vertical = LinearDeformableConv(config.in_channels, width, VERTICAL, **kw)
        self.h_act = nn.Sequential(nn.InstanceNorm2d(width, affine=True), nn.ReLU(inplace=True))
        self.v_act = nn.Sequential(nn.InstanceNorm2d(width, affine=True), nn.ReLU(inplace=True))
        self.fuse = conv_norm_relu(N_BRANCHES * width, config.out_channels, 1, 0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ld_forward(self, x)

    def offset_fields(self, x: torch.Tensor) -> tuple[OffsetField, OffsetField]:
        return self.horizontal.offsets(x), self.vertical.offsets(x)


def ld_forward(block: LDBlock, x: torch.Tensor) -> torch.Tensor:
    """Shape-preserving LD forward pass; output has ``out_channels`` channels."""
    if x.dim() != 4:
        raise ValueError(f"expected a (B, C, H, W) feature map, got shape {tuple(x.shape)}")
    cfg = block.config
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
    if min(x.shape[-2:]) < 1:
        raise ValueError("feature map must be at least 1x1")
    base = block.base(x)
    horiz = block.h_act(block.horizontal(x))
    vert = block.v_act(block.vertical(x))
    return block.fuse(torch.cat([base, horiz, vert], dim=1))


def apply_taps(taps: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Contract sampled taps (B, C, H, W, K) with a 1xK / Kx1 kernel.

    Written as an explicit column matrix times the flattened kernel, the
    same product an im2col convolution performs.
    """
    b, c, h, w, k = taps.shape
    cols = taps.permute(0, 2, 3, 1, 4).reshape(b * h * w, c * k)
    flat = weight.reshape(weight.shape[0], c * k)
    out = cols @ flat.t() if bias is None else torch.addmm(bias, cols, flat.t())
    return out.view(b, h, w, -1).permute(0, 3, 1, 2)


def rigid_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None,
               orientation: str) -> torch.Tensor:
    """Replicate-padded 1xL / Lx1 convolution by im2col on a fixed grid."""
    b, c, h, w = x.shape
    if orientation == HORIZONTAL:
        k = weight.shape[-1]
        padded = F.pad(x, (k // 2, k // 2, 0, 0), mode="replicate")
        cols = F.unfold(padded, (1, k))
    else:
        k = weight.shape[-2]
        padded = F.pad(x, (0, 0, k // 2, k // 2), mode="replicate")
        cols = F.unfold(padded, (k, 1))
    # (B, C*K, H*W) -> (B, C, H, W, K)
    taps = cols.view(b, c, k, h, w).permute(0, 1, 3, 4, 2)
    return apply_taps(taps, weight, bias)
