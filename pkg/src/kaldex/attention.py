"""Cross-attention aggregation of LD detail features with backbone context."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


class CrossAttention(nn.Module):
    """Single-head attention from LD features (queries) to context (keys/values).

    ``Q = W_Q X_D``, ``K = W_K X_S``, ``V = W_V X_S`` on flattened spatial
    positions; the output ``softmax(Q K^T / sqrt(d_k)) V`` is reshaped back to
    the input grid and has ``d_k`` channels.
    """

    def __init__(self, detail_channels: int, context_channels: int, d_k: int | None = None):
        super().__init__()
        self.d_k = d_k or context_channels
        self.w_q = nn.Linear(detail_channels, self.d_k, bias=False)
        self.w_k = nn.Linear(context_channels, self.d_k, bias=False)
        self.w_v = nn.Linear(context_channels, self.d_k, bias=False)

    def forward(self, x_d: torch.Tensor, x_s: torch.Tensor) -> torch.Tensor:
        return ca_forward(x_d, x_s, self)


def _flatten(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(1, 2)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic attention matrix for (B, N, d) queries and (B, M, d) keys."""
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1)


def ca_forward(x_d: torch.Tensor, x_s: torch.Tensor, proj: CrossAttention,
               return_weights: bool = False):
    if x_d.dim() != 4 or x_s.dim() != 4:
        raise ValueError("cross attention expects (B, C, H, W) inputs")
    if x_d.shape[0] != x_s.shape[0] or x_d.shape[-2:] != x_s.shape[-2:]:
        raise ValueError(
            f"X_D {tuple(x_d.shape)} and X_S {tuple(x_s.shape)} must share batch and spatial size"
        )
    b, _, h, w = x_d.shape
    q = proj.w_q(_flatten(x_d))
    k = proj.w_k(_flatten(x_s))
    v = proj.w_v(_flatten(x_s))
    attn = attention_weights(q, k)
    out = (attn @ v).transpose(1, 2).reshape(b, proj.d_k, h, w)
    if return_weights:
        return out, attn
    return out
