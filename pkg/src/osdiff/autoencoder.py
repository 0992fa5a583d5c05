"""Toy stand-in for the frozen VAE pair: images <-> 4-channel latents at 1/4 resolution."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .nn import Adam, ParamStore, Rng, ShapeError, backward, silu
from .nn.modules import Conv2d, Downsample, GroupNorm, ResBlock, Upsample

log = logging.getLogger(__name__)

LATENT_CHANNELS = 4
DIM_MULTIPLE = 32


class VaeGateError(RuntimeError):
    def __init__(self, psnr_db: float, gate: float):
        self.psnr_db = psnr_db
        super().__init__(f"VAE pretraining ended at {psnr_db:.2f} dB, gate is {gate:.1f} dB")


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) or (H, W, 3) floats -> N×3×H×W tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().float().numpy().transpose(0, 2, 3, 1)


def check_image_dims(h: int, w: int) -> None:
    if h % DIM_MULTIPLE or w % DIM_MULTIPLE:
        raise ShapeError(f"image {h}x{w}: both dims must be multiples of {DIM_MULTIPLE}")


class Encoder(nn.Module):
    """Two stride-2 stages; full resolution is only touched by the first conv."""

    def __init__(self, width: int = 32):
        super().__init__()
        c, c2 = width, 2 * width
        self.down0 = Downsample(3, c)
        self.block0 = ResBlock(c, c)
        self.down1 = Downsample(c, c2)
        self.block1 = ResBlock(c2, c2)
        self.block2 = ResBlock(c2, c2)
        self.norm_out = GroupNorm(c2)
        self.conv_out = Conv2d(c2, LATENT_CHANNELS)

    def forward(self, x):
        h = self.block0(self.down0(x))
        h = self.block2(self.block1(self.down1(h)))
        return self.conv_out(silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, width: int = 32):
        super().__init__()
        c, c2 = width, 2 * width
        self.conv_in = Conv2d(LATENT_CHANNELS, c2)
        self.block0 = ResBlock(c2, c2)
        self.block1 = ResBlock(c2, c2)
        self.up0 = Upsample(c2, c)
        self.block2 = ResBlock(c, c)
        self.norm_out = GroupNorm(c)
        self.up1 = Upsample(c, 3)

    def forward(self, y):
        h = self.block1(self.block0(self.conv_in(y)))
        h = self.block2(self.up0(h))
        return self.up1(silu(self.norm_out(h)))


class AutoEncoder(nn.Module):
    def __init__(self, width: int = 32):
        super().__init__()
        self.width = width
        self.encoder = Encoder(width)
        self.decoder = Decoder(width)


def encode(x: torch.Tensor, vae: AutoEncoder) -> torch.Tensor:
    check_image_dims(x.shape[-2], x.shape[-1])
    if x.shape[1] != 3:
        raise ShapeError(f"expected 3-channel images, got {x.shape[1]}")
    return vae.encoder(x)


def decode(y: torch.Tensor, vae: AutoEncoder, clamp: bool = True) -> torch.Tensor:
    if y.shape[1] != LATENT_CHANNELS:
        raise ShapeError(f"expected {LATENT_CHANNELS}-channel latent, got {y.shape[1]}")
    out = vae.decoder(y)
    return out.clamp(0, 1) if clamp else out


def batch_psnr(x: torch.Tensor, x_hat: torch.Tensor) -> float:
    """Mean per-image PSNR on the 8-bit scale, computed on rounded pixels."""
    a = torch.round(x.clamp(0, 1) * 255).double()
    b = torch.round(x_hat.clamp(0, 1) * 255).double()
    mse = ((a - b) ** 2).mean(dim=(1, 2, 3)).clamp_min(1e-10)
    return float((10 * torch.log10(255.0 ** 2 / mse)).mean())


@dataclass
class VaeConfig:
    width: int = 32
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    lr_final: float = 1e-4
    seed: int = 0
    gate_db: float = 28.0
    epoch_size: int = 100   # steps per "epoch" when reporting the loss curve


@torch.no_grad()
def evaluate_vae(vae: AutoEncoder, images: np.ndarray, batch: int = 50) -> float:
    vals = []
    for i in range(0, len(images), batch):
        x = images_to_tensor(images[i:i + batch])
        vals.append(batch_psnr(x, decode(encode(x, vae), vae)) * len(x))
    return sum(vals) / len(images)


def pretrain_vae(corpus: np.ndarray, config: VaeConfig, held_out: np.ndarray | None = None,
                 vae: AutoEncoder | None = None, on_epoch=None) -> tuple[AutoEncoder, dict]:
    """Fit the autoencoder by pixel MSE, check the PSNR gate, then freeze it.

    Returns the frozen model and a history dict with per-epoch mean losses and
    the final held-out PSNR. Raises :class:`VaeGateError` if the gate is missed.
    """
    if len(corpus) < 1000:
        raise ValueError(f"VAE pretraining needs >= 1000 images, got {len(corpus)}")
    torch.manual_seed(config.seed)
    vae = vae or AutoEncoder(config.width)
    store = ParamStore(vae)
    opt = Adam(store, lr=config.lr)
    rng = Rng(config.seed)
    data = images_to_tensor(corpus)
    epoch_losses, running = [], []
    for step in range(config.steps):
        # cosine decay from lr to lr_final
        frac = step / max(1, config.steps - 1)
        opt.lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + np.cos(np.pi * frac))
        idx = torch.from_numpy(rng.integers(0, len(data), config.batch_size))
        x = data[idx]
        store.zero_grad()
        loss = torch.mean((decode(encode(x, vae), vae, clamp=False) - x) ** 2)
        backward(loss, store)
        opt.step()
        running.append(loss.item())
        if len(running) == config.epoch_size:
            epoch_losses.append(float(np.mean(running)))
            running = []
            if on_epoch:
                on_epoch(len(epoch_losses), epoch_losses[-1])
    held_out = corpus[-100:] if held_out is None else held_out
    psnr_db = evaluate_vae(vae, held_out)
    log.info("VAE pretraining done: held-out PSNR %.2f dB", psnr_db)
    store.freeze()
    if psnr_db < config.gate_db:
        raise VaeGateError(psnr_db, config.gate_db)
    return vae, {"epoch_loss": epoch_losses, "psnr_db": psnr_db}
