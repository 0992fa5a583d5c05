"""Latent-space discriminator (and the pixel-space ablation variant) with the GAN losses."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffusion import NoiseSchedule, forward_diffuse
from .denoiser import UNet
from .nn import Rng, ShapeError, sigmoid, silu
from .nn.modules import Downsample, GroupNorm, Linear, ResBlock

SCORE_EPS = 1e-6


def clamp_score(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(SCORE_EPS, 1 - SCORE_EPS)


class ScoreHead(nn.Module):
    """Pooled features -> two hidden layers -> sigmoid. Final layer starts at zero (score 0.5)."""

    def __init__(self, d_in: int, hidden: int = 64):
        super().__init__()
        self.fc0 = Linear(d_in, hidden)
        self.fc1 = Linear(hidden, hidden)
        self.fc2 = Linear(hidden, 1, zero_init=True)

    def forward(self, feats):
        h = silu(self.fc1(silu(self.fc0(feats))))
        return clamp_score(sigmoid(self.fc2(h))).squeeze(-1)


class LatentDiscriminator(nn.Module):
    """f_d (a trainable copy of the denoiser's input + middle blocks) followed by the MLP head."""

    def __init__(self, unet: UNet, hidden: int = 64):
        super().__init__()
        self.features = copy.deepcopy(unet.inputs)
        for p in self.features.parameters():
            p.requires_grad_(True)
        d = sum(self.features.skip_channels) + self.features.skip_channels[-1]
        self.head = ScoreHead(d, hidden)

    def pooled(self, y_noisy, t):
        skips, mid, _ = self.features(y_noisy, t)
        return torch.cat([s.mean(dim=(2, 3)) for s in skips] + [mid.mean(dim=(2, 3))], 1)

    def middle_activations(self, y_noisy, t) -> torch.Tensor:
        _, mid, _ = self.features(y_noisy, t)
        return mid

    def forward(self, y_noisy, t):
        return self.head(self.pooled(y_noisy, t))


class PixelDiscriminator(nn.Module):
    """Ablation baseline: a small conv classifier on decoded pixels."""

    def __init__(self, width: int = 16, hidden: int = 64):
        super().__init__()
        self.down0 = Downsample(3, width)
        self.down1 = Downsample(width, 2 * width)
        self.block = ResBlock(2 * width, 2 * width)
        self.norm = GroupNorm(2 * width)
        self.head = ScoreHead(2 * width, hidden)

    def forward(self, x, t=None):
        h = self.block(self.down1(silu(self.down0(x))))
        return self.head(silu(self.norm(h)).mean(dim=(2, 3)))


def discriminate(y_noisy: torch.Tensor, t, disc: nn.Module) -> torch.Tensor:
    if y_noisy.dim() != 4:
        raise ShapeError(f"discriminator expects N×C×H×W, got {tuple(y_noisy.shape)}")
    return disc(y_noisy, t)


def generator_gan_loss(score_fake: torch.Tensor) -> torch.Tensor:
    """-E[log D(fake)], natural log."""
    return -torch.log(torch.as_tensor(score_fake)).mean()


def discriminator_loss(score_fake: torch.Tensor, score_real: torch.Tensor) -> torch.Tensor:
    """-E[log(1 - D(fake))] - E[log D(real)]."""
    fake = torch.as_tensor(score_fake)
    real = torch.as_tensor(score_real)
    return -torch.log(1 - fake).mean() - torch.log(real).mean()


@dataclass
class NoisyPair:
    t: np.ndarray
    y0_t: torch.Tensor
    yr_t: torch.Tensor


def sample_noisy_pair(y0: torch.Tensor, y_r: torch.Tensor, schedule: NoiseSchedule, rng: Rng,
                      t_max: int | None = None, shared_noise: bool = False) -> NoisyPair:
    """Diffuse real and generated latents to one shared t ~ U{1..t_max} per sample."""
    if y0.shape != y_r.shape:
        raise ShapeError(f"pair shapes differ: {tuple(y0.shape)} vs {tuple(y_r.shape)}")
    t_max = t_max or schedule.T // 2
    t = rng.integers(1, t_max + 1, size=y0.shape[0])
    eps_real = rng.normal(y0.shape, y0.dtype)
    eps_fake = eps_real if shared_noise else rng.normal(y0.shape, y0.dtype)
    return NoisyPair(t, forward_diffuse(y0, t, eps_real, schedule),
                     forward_diffuse(y_r, t, eps_fake, schedule))
