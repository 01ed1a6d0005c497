"""Kalman-smoothed kernel coordinates and bilinear feature sampling.

A linear deformable kernel of odd length ``L`` has a fixed center tap and two
arms of ``(L - 1) // 2`` taps each. Every arm receives its own raw per-tap
displacements ``delta_1..delta_n``; these are smoothed by the scalar Kalman
recursion

    K_i = p_{i-1} / (p_{i-1} + r)
    x_i = x_{i-1} + K_i * delta_i
    p_i = (1 - K_i) * p_{i-1}

starting from ``x_0 = 0`` and ``p_0 = 1``. With ``p_0 = 1`` the gain has the
closed form ``K_i = 1 / (i + r)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
import torch

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


@dataclass(frozen=True)
class KalmanState:
    p: float = 1.0
    r: float = 0.01
    x: float = 0.0
    step_index: int = 0

    def update(self, delta: float) -> tuple["KalmanState", float]:
        gain = self.p / (self.p + self.r)
        new = KalmanState(
            p=(1.0 - gain) * self.p,
            r=self.r,
            x=self.x + gain * delta,
            step_index=self.step_index + 1,
        )
        return new, gain


@dataclass(frozen=True)
class KernelSpec:
    length: int = 9
    orientation: str = HORIZONTAL
    offset_extent: float = 2.0

    def __post_init__(self):
        if self.length < 1 or self.length % 2 == 0:
            raise ValueError(f"kernel length must be a positive odd integer, got {self.length}")
        if self.orientation not in (HORIZONTAL, VERTICAL):
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if self.offset_extent <= 0:
            raise ValueError("offset_extent must be positive")

    @property
    def arm(self) -> int:
        return (self.length - 1) // 2

    def tap_positions(self) -> np.ndarray:
        """Integer tap offsets ``-arm..arm`` in kernel order."""
        return np.arange(-self.arm, self.arm + 1)


@dataclass
class OffsetField:
    """Raw and Kalman-smoothed displacements, shape (batch, taps - 1, H, W).

    Channels ``[:arm]`` belong to the positive arm (taps +1..+arm) and
    ``[arm:]`` to the negative arm (taps -1..-arm), each ordered outward from
    the center.
    """

    raw: torch.Tensor
    smoothed: torch.Tensor


def kalman_gain_sequence(n: int, r: float, p0: float = 1.0) -> tuple[list[float], float]:
    """Iterate the gain/covariance recursion ``n`` times.

    Returns the gains ``K_1..K_n`` and the final covariance ``p_n``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not r > 0:
        raise ValueError(f"measurement noise r must be positive, got {r}")
    if not p0 > 0:
        raise ValueError(f"initial covariance p0 must be positive, got {p0}")
    gains = []
    p = float(p0)
    for _ in range(n):
        k = p / (p + r)
        gains.append(k)
        p = (1.0 - k) * p
    return gains, p


def kalman_accumulate(deltas, r: float, dim: int = -1):
    """Kalman-smoothed cumulative coordinates ``x_1..x_n`` from raw offsets.

    ``deltas`` may be a sequence, a numpy array or a torch tensor; for arrays
    the recursion runs along ``dim``. Torch inputs stay differentiable and
    ``dx_j / d delta_i = K_i`` for ``i <= j``.
    """
    is_tensor = isinstance(deltas, torch.Tensor)
    d = deltas if is_tensor else np.asarray(deltas, dtype=np.float64)
    if is_tensor:
        if torch.isnan(d).any():
            raise FloatingPointError("NaN in raw offsets")
    elif np.isnan(d).any():
        raise FloatingPointError("NaN in raw offsets")
    n = d.shape[dim]
    if n == 0:
        return d
    gains, _ = kalman_gain_sequence(n, r)
    shape = [1] * d.ndim
    shape[dim] = n
    if is_tensor:
        k = torch.tensor(gains, dtype=d.dtype, device=d.device).view(shape)
        return torch.cumsum(d * k, dim=dim)
    k = np.asarray(gains).reshape(shape)
    return np.cumsum(d * k, axis=dim)


def build_sample_grid(
    base_position: tuple[float, float],
    positive_arm: Sequence[float],
    negative_arm: Sequence[float],
    spec: KernelSpec,
) -> np.ndarray:
    """Tap coordinates ``(row, col)`` for one output pixel, in kernel order.

    ``positive_arm``/``negative_arm`` are the smoothed offsets of taps
    ``+1..+arm`` and ``-1..-arm``. Only the axis along the kernel is displaced.
    """
    pos = np.asarray(positive_arm, dtype=np.float64)
    neg = np.asarray(negative_arm, dtype=np.float64)
    if pos.shape != (spec.arm,) or neg.shape != (spec.arm,):
        raise ValueError(
            f"expected {spec.arm} offsets per arm, got {pos.shape} and {neg.shape}"
        )
    row, col = float(base_position[0]), float(base_position[1])
    along = np.zeros(spec.length)
    along[spec.arm + 1:] = pos
    along[:spec.arm] = neg[::-1]
    along += spec.tap_positions()
    coords = np.empty((spec.length, 2))
    if spec.orientation == HORIZONTAL:
        coords[:, 0] = row
        coords[:, 1] = col + along
    else:
        coords[:, 0] = row + along
        coords[:, 1] = col
    return coords


def tap_displacements(smoothed: torch.Tensor, arm: int) -> torch.Tensor:
    """Reorder a smoothed field (B, 2*arm, H, W) into kernel order (B, H, W, 2*arm+1).

    Adds the integer tap step so the result is the full displacement of each
    tap from the output pixel along the kernel axis.
    """
    b, _, h, w = smoothed.shape
    pos = smoothed[:, :arm]
    neg = torch.flip(smoothed[:, arm:], dims=[1])
    center = smoothed.new_zeros(b, 1, h, w)
    field = torch.cat([neg, center, pos], dim=1)
    steps = torch.arange(-arm, arm + 1, dtype=smoothed.dtype, device=smoothed.device)
    return field.permute(0, 2, 3, 1) + steps


def _clamped_corners(coord: torch.Tensor, size: int):
    coord = coord.clamp(0, size - 1)
    lo = torch.floor(coord)
    frac = coord - lo
    lo = lo.long()
    hi = (lo + 1).clamp(max=size - 1)
    return lo, hi, frac


def bilinear_sample(feature: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinear interpolation with border clamping.

    Parameters
    ----------
    feature : Tensor (B, C, H, W) or (H, W)
    coords : Tensor (..., 2) of (row, col) positions. For a 4-D feature the
        leading dimension of ``coords`` must be B.

    Returns
    -------
    Tensor of shape (B, C, ...) (or ``coords.shape[:-1]`` for 2-D features).
    Differentiable in ``feature`` and, away from lattice lines, in ``coords``.
    """
    squeeze = feature.dim() == 2
    if squeeze:
        feature = feature[None, None]
        coords = coords[None]
    b, c, h, w = feature.shape
    if coords.shape[0] != b or coords.shape[-1] != 2:
        raise ValueError("coords must have shape (B, ..., 2)")
    out_shape = coords.shape[1:-1]
    flat = coords.reshape(b, -1, 2)
    r0, r1, fr = _clamped_corners(flat[..., 0], h)
    c0, c1, fc = _clamped_corners(flat[..., 1], w)
    plane = feature.reshape(b, c, h * w)

    def gather(ri, ci):
        idx = (ri * w + ci)[:, None, :].expand(b, c, -1)
        return torch.gather(plane, 2, idx)

    fr = fr[:, None, :]
    fc = fc[:, None, :]
    top = gather(r0, c0) * (1 - fc) + gather(r0, c1) * fc
    bottom = gather(r1, c0) * (1 - fc) + gather(r1, c1) * fc
    out = top * (1 - fr) + bottom * fr
    out = out.reshape(b, c, *out_shape)
    return out[0, 0] if squeeze else out


@numba.njit(cache=True)
def _lerp_rows_forward(rows, lo, hi, frac, out):
    n, c = out.shape
    for i in range(n):
        f = frac[i]
        a = rows[lo[i]]
        b = rows[hi[i]]
        for j in range(c):
            out[i, j] = a[j] + f * (b[j] - a[j])


@numba.njit(cache=True)
def _lerp_rows_backward(grad, rows, lo, hi, frac, grad_rows, grad_frac):
    n, c = grad.shape
    for i in range(n):
        f = frac[i]
        a = rows[lo[i]]
        b = rows[hi[i]]
        s = 0.0
        for j in range(c):
            g = grad[i, j]
            grad_rows[lo[i], j] += g - g * f
            grad_rows[hi[i], j] += g * f
            s += g * (b[j] - a[j])
        grad_frac[i] = s


class _LerpRows(torch.autograd.Function):
    """``out[i] = rows[lo[i]] + frac[i] * (rows[hi[i]] - rows[lo[i]])`` over channel rows."""

    @staticmethod
    def forward(ctx, rows, lo, hi, frac):
        rows = rows.contiguous()
        frac = frac.contiguous()
        out = rows.new_empty(lo.shape[0], rows.shape[1])
        _lerp_rows_forward(rows.detach().numpy(), lo.numpy(), hi.numpy(),
                           frac.detach().numpy(), out.numpy())
        ctx.save_for_backward(rows, lo, hi, frac)
        return out

    @staticmethod
    def backward(ctx, grad):
        rows, lo, hi, frac = ctx.saved_tensors
        grad = grad.contiguous()
        grad_rows = torch.zeros_like(rows)
        grad_frac = torch.empty_like(frac)
        _lerp_rows_backward(grad.detach().numpy(), rows.detach().numpy(), lo.numpy(),
                            hi.numpy(), frac.detach().numpy(), grad_rows.numpy(),
                            grad_frac.numpy())
        return grad_rows, None, None, grad_frac


def sample_along_axis(feature: torch.Tensor, displacement: torch.Tensor, axis: str) -> torch.Tensor:
    """Sample taps displaced along one axis only.

    ``displacement`` has shape (B, H, W, K) and holds, per output pixel, the
    offset of each tap along ``axis`` (integer step included). Equivalent to
    :func:`bilinear_sample` with the perpendicular coordinate fixed on the
    lattice, but interpolates whole channel vectors at once.

    Returns (B, C, H, W, K) for horizontal and (B, C, H, K, W) for vertical,
    the layouts consumed by strided 1xK / Kx1 convolutions.
    """
    if feature.device.type != "cpu":
        raise NotImplementedError("axis sampling is implemented for CPU tensors")
    b, c, h, w = feature.shape
    k = displacement.shape[-1]
    idx = torch.arange
    if axis == HORIZONTAL:
        pos = idx(w, dtype=displacement.dtype)[None, None, :, None] + displacement
        lo, hi, frac = _clamped_corners(pos, w)
        base = (idx(b * h) * w).view(b, h, 1, 1)
    elif axis == VERTICAL:
        pos = idx(h, dtype=displacement.dtype)[None, :, None, None] + displacement
        lo, hi, frac = _clamped_corners(pos, h)
        lo, hi = lo * w, hi * w
        base = (idx(b)[:, None, None, None] * h * w) + idx(w).view(1, 1, w, 1)
    else:
        raise ValueError(f"unknown axis {axis!r}")
    rows = feature.permute(0, 2, 3, 1).reshape(b * h * w, c)
    out = _LerpRows.apply(rows, (lo + base).reshape(-1), (hi + base).reshape(-1),
                          frac.reshape(-1))
    out = out.view(b, h, w, k, c)
    if axis == HORIZONTAL:
        return out.permute(0, 4, 1, 2, 3)
    return out.permute(0, 4, 1, 3, 2)
