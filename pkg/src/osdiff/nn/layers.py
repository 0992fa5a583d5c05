"""Functional layer suite on top of torch tensors.

Every op validates its shapes up front and raises :class:`ShapeError` with a
readable message instead of letting torch fail deep inside a kernel.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

GROUP_NORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an activation or gradient contains NaN/Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by {op}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def check_finite(x: torch.Tensor, op: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).sum().item()
        raise NonFiniteError(op, f"{bad} of {x.numel()} entries")
    return x


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integer conv output: (size={size} + 2*{padding} - {kernel}) / {stride}"
        )
    return span // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> torch.Tensor:
    if x.dim() != 4 or weight.dim() != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {tuple(x.shape)}, {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError("conv2d expects square kernels")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    k = weight.shape[2]
    conv_output_size(x.shape[2], k, stride, padding)
    conv_output_size(x.shape[3], k, stride, padding)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def group_norm(x, groups: int, gamma=None, beta=None, eps: float = GROUP_NORM_EPS) -> torch.Tensor:
    if x.shape[1] % groups:
        raise ShapeError(f"{x.shape[1]} channels not divisible into {groups} groups")
    return F.group_norm(x, groups, gamma, beta, eps)


def silu(x) -> torch.Tensor:
    return F.silu(x)


def sigmoid(x) -> torch.Tensor:
    return torch.sigmoid(x)


def linear(x, weight, bias=None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    return F.linear(x, weight, bias)


def nearest_upsample_2x(x) -> torch.Tensor:
    if x.dim() != 4:
        raise ShapeError("nearest_upsample_2x expects N×C×H×W")
    return F.interpolate(x, scale_factor=2, mode="nearest")


def avgpool_down_2x(x) -> torch.Tensor:
    if x.dim() != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avgpool_down_2x needs even spatial dims, got {tuple(x.shape)}")
    return F.avg_pool2d(x, 2)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -torch.log(torch.tensor(max_period, dtype=torch.float64))
        * torch.arange(half, dtype=torch.float64) / half
    )
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb
