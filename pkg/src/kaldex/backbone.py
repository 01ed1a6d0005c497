"""UNet++ backbone with optional LDCA modules at nested decoder nodes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import CrossAttention, ca_forward
from .ld import LDBlock, LDConfig, conv_norm_relu

Site = tuple[int, int]


def nested_nodes(depth: int) -> list[Site]:
    """All decoder nodes (i, j) with j >= 1, in evaluation order."""
    return [(i, j) for j in range(1, depth + 1) for i in range(depth - j + 1)]


def default_sites(depth: int) -> tuple[Site, ...]:
    # level 0 (full-resolution) attention is quadratic in W*W; excluded by default
    return tuple(s for s in nested_nodes(depth) if s[0] >= 1)


@dataclass
class BackboneConfig:
    depth: int = 4
    base_width: int = 6
    patch_size: int = 48
    in_channels: int = 1
    ldca_sites: tuple[Site, ...] | None = None
    kernel_length: int = 9
    r: float = 0.01
    offset_extent: float = 2.0
    # initial foreground probability of the head (sets its bias)
    head_prior: float = 0.05

    def __post_init__(self):
        if not 0 < self.head_prior < 1:
            raise ValueError("head_prior must lie in (0, 1)")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.patch_size % (2 ** self.depth):
            raise ValueError(
                f"patch size {self.patch_size} is not divisible by 2**depth = {2 ** self.depth}"
            )
        if self.ldca_sites is None:
            self.ldca_sites = default_sites(self.depth)
        self.ldca_sites = tuple(sorted(tuple(int(v) for v in s) for s in self.ldca_sites))
        valid = set(nested_nodes(self.depth))
        bad = [s for s in self.ldca_sites if s not in valid]
        if bad:
            raise ValueError(f"LDCA sites {bad} are not nested nodes for depth {self.depth}")

    def widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.depth + 1)]

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["ldca_sites"] = [list(s) for s in self.ldca_sites]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        if d.get("ldca_sites") is not None:
            d["ldca_sites"] = tuple(tuple(s) for s in d["ldca_sites"])
        return cls(**d)


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(conv_norm_relu(in_ch, out_ch), conv_norm_relu(out_ch, out_ch))


class Up(nn.Module):
    """Bilinear x2 resize followed by a 3x3 convolution."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = conv_norm_relu(in_ch, out_ch)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv(x)


class LDCA(nn.Module):
    def __init__(self, in_ch: int, width: int, cfg: BackboneConfig):
        super().__init__()
        self.ld = LDBlock(LDConfig(in_ch, width, cfg.kernel_length, cfg.r, cfg.offset_extent))
        self.ca = CrossAttention(width, width)

    def forward(self, cat: torch.Tensor, x_s: torch.Tensor) -> torch.Tensor:
        x_d = self.ld(cat)
        return ca_forward(x_d, x_s, self.ca) + x_s


def _key(i: int, j: int) -> str:
    return f"{i}_{j}"


class UNetPlusPlus(nn.Module):
    """Nested UNet++ producing per-pixel foreground probability.

    At a node listed in ``ldca_sites`` the standard conv block output ``X_S``
    is aggregated with the LD features of the same concatenated input by
    cross attention, with a residual connection to ``X_S``.
    """

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = cfg = config or BackboneConfig()
        w = cfg.widths()
        self.pool = nn.MaxPool2d(2)
        self.encoder = nn.ModuleList(
            [ConvBlock(cfg.in_channels, w[0])]
            + [ConvBlock(w[i - 1], w[i]) for i in range(1, cfg.depth + 1)]
        )
        self.up = nn.ModuleDict()
        self.nodes = nn.ModuleDict()
        for i, j in nested_nodes(cfg.depth):
            self.up[_key(i, j)] = Up(w[i + 1], w[i])
            self.nodes[_key(i, j)] = ConvBlock((j + 1) * w[i], w[i])
        self.head = nn.Conv2d(w[0], 1, 1)
        # thin structures cover a few percent of pixels; start the head there
        nn.init.constant_(self.head.bias, math.log(cfg.head_prior / (1 - cfg.head_prior)))
        # built last so a baseline with the same seed shares every other parameter
        self.ldca = nn.ModuleDict()
        for i, j in cfg.ldca_sites:
            self.ldca[_key(i, j)] = LDCA((j + 1) * w[i], w[i], cfg)

    def forward_logits(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.dim() != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (B, {cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        step = 2 ** cfg.depth
        if h % step or w % step:
            raise ValueError(f"input size {h}x{w} is not divisible by 2**depth = {step}")
        grid: dict[Site, torch.Tensor] = {}
        feat = x
        for i, block in enumerate(self.encoder):
            feat = block(feat if i == 0 else self.pool(feat))
            grid[(i, 0)] = feat
        for i, j in nested_nodes(cfg.depth):
            k = _key(i, j)
            cat = torch.cat([grid[(i, m)] for m in range(j)] + [self.up[k](grid[(i + 1, j - 1)])], dim=1)
            x_s = self.nodes[k](cat)
            if k in self.ldca:
                x_s = self.ldca[k](cat, x_s)
            grid[(i, j)] = x_s
        return self.head(grid[(0, cfg.depth)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward_logits(x))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
