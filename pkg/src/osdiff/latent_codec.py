"""Analysis/synthesis transforms, quantizer and the factorized entropy model."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .autoencoder import LATENT_CHANNELS
from .entropy_coder import TOTAL, CoderError
from .nn import Rng, ShapeError, silu
from .nn.modules import Conv2d, Downsample, GroupNorm, ResBlock, Upsample

LIKELIHOOD_FLOOR = 1e-9


class SupportError(ValueError):
    pass


class Analysis(nn.Module):
    """G_a: 4-channel latent -> ``code_channels`` at half the spatial size."""

    def __init__(self, code_channels: int = 8, width: int = 64):
        super().__init__()
        self.conv_in = Conv2d(LATENT_CHANNELS, width)
        self.block0 = ResBlock(width, width)
        self.block1 = ResBlock(width, width)
        self.down = Downsample(width)
        self.block2 = ResBlock(width, width)
        self.norm_out = GroupNorm(width)
        self.conv_out = Conv2d(width, code_channels)

    def forward(self, y0):
        if y0.shape[1] != LATENT_CHANNELS:
            raise ShapeError(f"analysis expects {LATENT_CHANNELS} channels, got {y0.shape[1]}")
        if y0.shape[2] % 2 or y0.shape[3] % 2:
            raise ShapeError(f"analysis needs even latent dims, got {tuple(y0.shape[2:])}")
        h = self.block1(self.block0(self.conv_in(y0)))
        h = self.block2(self.down(h))
        return self.conv_out(silu(self.norm_out(h)))


class Synthesis(nn.Module):
    """G_s: code grid -> 4-channel latent at twice the code resolution."""

    def __init__(self, code_channels: int = 8, width: int = 64):
        super().__init__()
        self.code_channels = code_channels
        self.conv_in = Conv2d(code_channels, width)
        self.block0 = ResBlock(width, width)
        self.up = Upsample(width)
        self.block1 = ResBlock(width, width)
        self.block2 = ResBlock(width, width)
        self.norm_out = GroupNorm(width)
        self.conv_out = Conv2d(width, LATENT_CHANNELS)

    def forward(self, y_hat):
        if y_hat.shape[1] != self.code_channels:
            raise ShapeError(f"synthesis expects {self.code_channels} channels, got {y_hat.shape[1]}")
        h = self.up(self.block0(self.conv_in(y_hat)))
        h = self.block2(self.block1(h))
        return self.conv_out(silu(self.norm_out(h)))


def quantize(v: torch.Tensor, mode: str = "hard", bound: int = 31, rng: Rng | None = None) -> torch.Tensor:
    """``hard``: round half to even and clamp; ``noise``: add U(-0.5, 0.5);
    ``ste``: hard values forward, identity gradient backward."""
    if mode == "hard":
        return torch.round(v).clamp(-bound, bound)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise quantization needs an Rng")
        return v + rng.uniform(v.shape, -0.5, 0.5, v.dtype)
    if mode == "ste":
        return v + (torch.round(v).clamp(-bound, bound) - v).detach()
    raise ValueError(f"unknown quantization mode {mode!r}")


def _sigmoid_diff(upper: torch.Tensor, lower: torch.Tensor) -> torch.Tensor:
    """sigmoid(upper) - sigmoid(lower), evaluated on the side that avoids cancellation."""
    sign = -torch.sign(upper + lower)
    sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    return torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))


class EntropyModel(nn.Module):
    """Per-channel mixture of logistics, renormalised onto [-L-0.5, L+0.5]."""

    def __init__(self, channels: int = 8, bound: int = 31, components: int = 3):
        super().__init__()
        self.channels = channels
        self.bound = bound
        spread = torch.linspace(-1.0, 1.0, components)
        self.logits = nn.Parameter(torch.zeros(channels, components))
        self.means = nn.Parameter(spread.repeat(channels, 1))
        self.log_scales = nn.Parameter(torch.zeros(channels, components))
        self.tables: np.ndarray | None = None  # (channels, 2L+2) frozen 16-bit CDFs

    @property
    def num_symbols(self) -> int:
        return 2 * self.bound + 1

    def _params(self, like: torch.Tensor):
        shape = (1, self.channels, 1, 1, -1) if like.dim() == 4 else (self.channels, 1, -1)
        w = torch.softmax(self.logits, -1).to(like.dtype).reshape(shape)
        mu = self.means.to(like.dtype).reshape(shape)
        inv_s = torch.exp(-self.log_scales).to(like.dtype).reshape(shape)
        return w, mu, inv_s

    def interval_mass(self, lo: torch.Tensor, hi: torch.Tensor) -> torch.Tensor:
        """Normalised probability of [lo, hi] per element; lo/hi shaped N×C×h×w or C×n."""
        edge = self.bound + 0.5
        w, mu, inv_s = self._params(lo)
        lo = lo.clamp(-edge, edge).unsqueeze(-1)
        hi = hi.clamp(-edge, edge).unsqueeze(-1)
        mass = (w * _sigmoid_diff((hi - mu) * inv_s, (lo - mu) * inv_s)).sum(-1)
        e = torch.full_like(lo, edge)
        z = (w * _sigmoid_diff((e - mu) * inv_s, (-e - mu) * inv_s)).sum(-1)
        return mass / z

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        lo = torch.full_like(x, -(self.bound + 0.5))
        return self.interval_mass(lo, x)

    def likelihood(self, v: torch.Tensor) -> torch.Tensor:
        edge = self.bound + 0.5
        if torch.any(v.detach().abs() > edge):
            raise SupportError(f"values outside the model support [-{edge}, {edge}]")
        return self.interval_mass(v - 0.5, v + 0.5).clamp_min(LIKELIHOOD_FLOOR)

    def pmf(self, dtype=torch.float64) -> torch.Tensor:
        """Symbol probabilities, shape (channels, 2L+1)."""
        sym = torch.arange(-self.bound, self.bound + 1, dtype=dtype).expand(self.channels, -1)
        return self.interval_mass(sym - 0.5, sym + 0.5)


def estimate_rate(values: torch.Tensor, model: EntropyModel, per_channel: bool = False) -> torch.Tensor:
    """Bits -sum(log2 p(v)); integer values use the symbol mass, noisy ones the unit interval around v."""
    bits = -torch.log2(model.likelihood(values))
    if per_channel:
        return bits.sum(dim=(0, 2, 3))
    return bits.sum()


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer frequencies summing to TOTAL with every symbol >= 1."""
    pmf = np.asarray(pmf, dtype=np.float64)
    if np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
        raise CoderError("learned CDF is not monotone")
    n = pmf.size
    if n > TOTAL:
        raise CoderError("alphabet larger than the table precision")
    p = pmf / pmf.sum()
    scaled = p * (TOTAL - n)
    freq = 1 + np.floor(scaled).astype(np.int64)
    short = TOTAL - int(freq.sum())
    if short:
        # largest fractional parts first, ties to the lower symbol
        order = np.lexsort((np.arange(n), -(scaled - np.floor(scaled))))
        freq[order[:short]] += 1
    return freq


def fit_cdf_tables(model: EntropyModel) -> np.ndarray:
    """Freeze the model into per-channel cumulative tables of length 2L+2."""
    with torch.no_grad():
        pmf = model.pmf(torch.float64).numpy()
    tables = np.zeros((model.channels, model.num_symbols + 1), dtype=np.int64)
    for c in range(model.channels):
        tables[c, 1:] = np.cumsum(quantize_pmf(pmf[c]))
    model.tables = tables
    return tables


class LatentCodec(nn.Module):
    def __init__(self, code_channels: int = 8, width: int = 64, bound: int = 31, components: int = 3):
        super().__init__()
        self.code_channels = code_channels
        self.bound = bound
        self.analysis = Analysis(code_channels, width)
        self.synthesis = Synthesis(code_channels, width)
        self.entropy = EntropyModel(code_channels, bound, components)
