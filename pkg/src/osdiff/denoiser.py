"""Conditional noise predictor with a zero-initialised control branch, and the decode loops."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .autoencoder import LATENT_CHANNELS
from .diffusion import (
    ALPHA_BAR_FLOOR,
    NoiseSchedule,
    ScheduleError,
    _coef,
    forward_diffuse,
    make_schedule,
    one_step_sample,
    strided_step,
    sub_schedule,
)
from .nn import Rng, ShapeError, avgpool_down_2x, silu, timestep_embedding
from .nn.modules import Conv2d, GroupNorm, Linear, ResBlock, Upsample


@dataclass(frozen=True)
class DenoiserConfig:
    width: int = 64
    mult: tuple[int, int] = (1, 2)
    blocks: int = 2
    emb_dim: int = 128
    t_star: int = 999
    # "v": the UNet outputs a velocity and the noise estimate is derived from it
    # "eps": the UNet output is the noise estimate itself
    param: str = "v"


class InputBlocks(nn.Module):
    """Timestep embedding, input conv, two-level encoder and middle block.

    This is the part of the UNet that the control branch and the latent
    discriminator replicate.
    """

    def __init__(self, cfg: DenoiserConfig, in_channels: int = LATENT_CHANNELS):
        super().__init__()
        c0, c1 = cfg.width * cfg.mult[0], cfg.width * cfg.mult[1]
        self.width = cfg.width
        self.time0 = Linear(cfg.width, cfg.emb_dim)
        self.time1 = Linear(cfg.emb_dim, cfg.emb_dim)
        self.conv_in = Conv2d(in_channels, c0)
        self.enc0 = nn.ModuleList(ResBlock(c0, c0, cfg.emb_dim) for _ in range(cfg.blocks))
        self.enc1 = nn.ModuleList(
            ResBlock(c0 if i == 0 else c1, c1, cfg.emb_dim) for i in range(cfg.blocks))
        self.mid = ResBlock(c1, c1, cfg.emb_dim)
        self.skip_channels = [c0] * (cfg.blocks + 1) + [c1] * cfg.blocks

    def embed(self, t, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(np.broadcast_to(np.asarray(t), (like.shape[0],)).copy())
        e = timestep_embedding(t, self.width).to(like.dtype)
        return self.time1(silu(self.time0(e)))

    def forward(self, x, t):
        emb = self.embed(t, x)
        h = self.conv_in(x)
        skips = [h]
        for block in self.enc0:
            h = block(h, emb)
            skips.append(h)
        h = avgpool_down_2x(h)
        for block in self.enc1:
            h = block(h, emb)
            skips.append(h)
        return skips, self.mid(h, emb), emb


class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        c0, c1 = cfg.width * cfg.mult[0], cfg.width * cfg.mult[1]
        self.inputs = InputBlocks(cfg)
        n = cfg.blocks
        self.dec1 = nn.ModuleList(ResBlock(c1 + c1, c1, cfg.emb_dim) for _ in range(n))
        self.up = Upsample(c1, c0)
        self.dec0 = nn.ModuleList(ResBlock(c0 + c0, c0, cfg.emb_dim) for _ in range(n + 1))
        self.norm_out = GroupNorm(c0)
        self.conv_out = Conv2d(c0, LATENT_CHANNELS)

    def forward(self, x, t, skip_res=None, mid_res=None):
        skips, h, emb = self.inputs(x, t)
        if skip_res is not None:
            skips = [s + r for s, r in zip(skips, skip_res)]
            h = h + mid_res
        n1 = len(self.dec1)
        for block, s in zip(self.dec1, reversed(skips[-n1:])):
            h = block(torch.cat([h, s], 1), emb)
        h = self.up(h)
        for block, s in zip(self.dec0, reversed(skips[:-n1])):
            h = block(torch.cat([h, s], 1), emb)
        return self.conv_out(silu(self.norm_out(h)))


class ControlBranch(nn.Module):
    """Trainable copy of the input blocks fed with y_t ⊕ y_c; zero 1×1 projections out."""

    def __init__(self, unet: UNet, cfg: DenoiserConfig):
        super().__init__()
        self.blocks = copy.deepcopy(unet.inputs)
        main_in = unet.inputs.conv_in
        widened = Conv2d(2 * LATENT_CHANNELS, main_in.weight.shape[0])
        with torch.no_grad():
            widened.weight.zero_()
            widened.weight[:, :LATENT_CHANNELS] = main_in.weight
            widened.bias.copy_(main_in.bias)
        self.blocks.conv_in = widened
        for p in self.blocks.parameters():
            p.requires_grad_(True)
        self.zero_skips = nn.ModuleList(
            Conv2d(c, c, kernel=1, zero_init=True) for c in unet.inputs.skip_channels)
        c1 = cfg.width * cfg.mult[1]
        self.zero_mid = Conv2d(c1, c1, kernel=1, zero_init=True)

    def forward(self, y_t, y_c, t):
        skips, mid, _ = self.blocks(torch.cat([y_t, y_c], 1), t)
        return [z(s) for z, s in zip(self.zero_skips, skips)], self.zero_mid(mid)


class Denoiser(nn.Module):
    """eps_theta(y_t, y_c, t). Counts forward evaluations in ``evaluations``.

    With ``param="v"`` the network output v is turned into a noise estimate
    via eps = sqrt(1 - ab_t) y_t + sqrt(ab_t) v. The clean-latent estimate of
    the one-step sampler is then sqrt(ab_t) y_t - sqrt(1 - ab_t) v, so errors
    in the network output are not amplified by 1/sqrt(ab_t) at large t.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), schedule: NoiseSchedule | None = None):
        super().__init__()
        if cfg.param not in ("v", "eps"):
            raise ValueError(f"unknown output parameterization {cfg.param!r}")
        self.cfg = cfg
        self.alpha_bar = (schedule or make_schedule()).alpha_bar
        self.unet = UNet(cfg)
        self.control: ControlBranch | None = None
        self.evaluations = 0

    def _to_eps(self, out, y_t, t):
        if self.cfg.param == "eps":
            return out
        ab = self.alpha_bar[np.asarray(t)]
        return _coef(np.sqrt(1 - ab), y_t) * y_t + _coef(np.sqrt(ab), y_t) * out

    def attach_control(self) -> None:
        self.control = ControlBranch(self.unet, self.cfg)

    def forward(self, y_t, y_c=None, t=1):
        self.evaluations += 1
        if y_c is None or self.control is None:
            return self._to_eps(self.unet(y_t, t), y_t, t)
        if y_c.shape != y_t.shape:
            raise ShapeError(f"condition {tuple(y_c.shape)} != noisy latent {tuple(y_t.shape)}")
        skip_res, mid_res = self.control(y_t, y_c, t)
        return self._to_eps(self.unet(y_t, t, skip_res, mid_res), y_t, t)


def predict_noise(y_t, y_c, t, model: Denoiser) -> torch.Tensor:
    if y_t.shape[1] != LATENT_CHANNELS:
        raise ShapeError(f"denoiser expects {LATENT_CHANNELS}-channel latents")
    return model(y_t, y_c, t)


def check_inference_t(t: int, s: NoiseSchedule) -> None:
    if not 1 <= t <= s.T:
        raise ScheduleError(f"t* = {t} outside [1, {s.T}]")
    if s.alpha_bar[t] <= ALPHA_BAR_FLOOR:
        raise ScheduleError(f"alpha_bar at t* = {t} is below the floor {ALPHA_BAR_FLOOR}")


def noised_condition(y_c: torch.Tensor, t: int, rng: Rng, s: NoiseSchedule) -> torch.Tensor:
    """Starting point of decoding: the condition diffused to step t."""
    return forward_diffuse(y_c, t, rng.normal(y_c.shape, y_c.dtype), s)


def decode_one_step(y_c: torch.Tensor, t_star: int, seed: int, model: Denoiser,
                    schedule: NoiseSchedule) -> torch.Tensor:
    """y_r from y_c with exactly one denoiser evaluation."""
    check_inference_t(t_star, schedule)
    y_t = noised_condition(y_c, t_star, Rng(seed), schedule)
    eps_hat = predict_noise(y_t, y_c, t_star, model)
    return one_step_sample(y_t, eps_hat, t_star, schedule)


def decode_multi_step(y_c: torch.Tensor, n_steps: int, seed: int, model: Denoiser,
                      schedule: NoiseSchedule, t_start: int | None = None) -> torch.Tensor:
    """Ancestral chain over ``n_steps`` evenly spaced timesteps; n_steps evaluations."""
    t_start = model.cfg.t_star if t_start is None else t_start
    if n_steps > schedule.T:
        raise ScheduleError(f"{n_steps} steps exceed T = {schedule.T}")
    check_inference_t(t_start, schedule)
    ts = sub_schedule(t_start, n_steps)
    rng = Rng(seed)
    y = noised_condition(y_c, t_start, rng, schedule)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_hat = predict_noise(y, y_c, t, model)
        y = strided_step(y, eps_hat, t, t_prev, schedule, rng)
    return y
