"""Parameterized building blocks shared by the VAE, transforms, denoiser and discriminators."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import layers as L


class Conv2d(nn.Module):
    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=None, zero_init=False):
        super().__init__()
        if padding is None:
            padding = kernel // 2
        self.stride = stride
        self.padding = padding
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out))
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
            bound = 1 / math.sqrt(c_in * kernel * kernel)
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return L.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(nn.Module):
    def __init__(self, d_in, d_out, zero_init=False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out))
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
            bound = 1 / math.sqrt(d_in)
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return L.linear(x, self.weight, self.bias)


class GroupNorm(nn.Module):
    def __init__(self, channels, groups=8):
        super().__init__()
        self.groups = min(groups, channels)
        while channels % self.groups:
            self.groups -= 1
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return L.group_norm(x, self.groups, self.weight, self.bias)


class ResBlock(nn.Module):
    """GN-SiLU-conv twice with a skip; optional additive timestep embedding."""

    def __init__(self, c_in, c_out, emb_dim=None, groups=8):
        super().__init__()
        self.norm1 = GroupNorm(c_in, groups)
        self.conv1 = Conv2d(c_in, c_out)
        self.emb = Linear(emb_dim, c_out) if emb_dim else None
        self.norm2 = GroupNorm(c_out, groups)
        self.conv2 = Conv2d(c_out, c_out)
        self.skip = Conv2d(c_in, c_out, kernel=1) if c_in != c_out else None

    def forward(self, x, emb=None):
        h = self.conv1(L.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(L.silu(emb))[:, :, None, None]
        h = self.conv2(L.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class Downsample(nn.Module):
    def __init__(self, channels, c_out=None):
        super().__init__()
        self.conv = Conv2d(channels, c_out or channels, kernel=4, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels, c_out=None):
        super().__init__()
        self.conv = Conv2d(channels, c_out or channels)

    def forward(self, x):
        return self.conv(L.nearest_upsample_2x(x))
