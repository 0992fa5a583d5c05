"""PSNR, MS-SSIM and Bjøntegaard delta-rate."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_val: float = 255.0) -> float:
    """PSNR in dB of two [0, 1] images measured on the 8-bit scale; ``inf`` when identical."""
    a, b = _check_pair(a, b)
    mse = np.mean((a * 255.0 - b * 255.0) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(max_val ** 2 / mse))


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filter over the first two axes of H×W×C."""
    k = g.size
    v = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(v, k, axis=1) @ g


def _ssim_terms(a, b, max_val):
    g = gaussian_window()
    c1, c2 = (K1 * max_val) ** 2, (K2 * max_val) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    cs = (2 * sab + c2) / (saa + sbb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    # per-channel spatial means
    return (lum * cs).mean(axis=(0, 1)), cs.mean(axis=(0, 1))


def _pool2(x):
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_scales(h: int, w: int) -> int:
    """Largest scale count (<= 5) whose coarsest level still fits the 11-px window."""
    n = 1
    while n < len(MS_SSIM_WEIGHTS) and min(h, w) // 2 ** n >= WINDOW:
        n += 1
    return n


def ms_ssim(a, b, scales: int | None = None) -> float:
    """Multi-scale SSIM of two [0, 1] images (H×W or H×W×C), averaged over channels.

    Images smaller than 160 px use fewer scales with renormalised weights and
    emit a warning.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    a, b = a * 255.0, b * 255.0
    full = ms_ssim_scales(*a.shape[:2])
    if scales is None:
        scales = full
        if scales < len(MS_SSIM_WEIGHTS):
            warnings.warn(f"{a.shape[0]}x{a.shape[1]} image: MS-SSIM reduced to {scales} scales",
                          stacklevel=2)
    if min(a.shape[:2]) // 2 ** (scales - 1) < WINDOW:
        raise ValueError(f"image too small for {scales} MS-SSIM scales")
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    values = []
    for j in range(scales):
        ssim, cs = _ssim_terms(a, b, 255.0)
        values.append(ssim if j == scales - 1 else cs)
        if j < scales - 1:
            a, b = _pool2(a), _pool2(b)
    stack = np.maximum(np.stack(values), 0.0)  # scales × channels
    per_channel = np.prod(stack ** weights[:, None], axis=0)
    return float(per_channel.mean())


# rate-distortion curves -----------------------------------------------------

@dataclass
class RdPoint:
    bpp: float
    psnr: float
    ms_ssim: float


@dataclass
class RdCurve:
    name: str
    points: list[RdPoint] = field(default_factory=list)

    def add(self, point: RdPoint) -> None:
        self.points.append(point)
        self.points.sort(key=lambda p: p.bpp)

    def validate(self) -> None:
        bpps = [p.bpp for p in self.points]
        if any(b <= 0 for b in bpps):
            raise ValueError("bpp must be positive")
        if any(y <= x for x, y in zip(bpps, bpps[1:])):
            raise ValueError(f"curve {self.name!r}: bpp must be strictly increasing")

    def arrays(self, metric: str = "ms_ssim"):
        rate = np.array([p.bpp for p in self.points])
        quality = np.array([getattr(p, metric) for p in self.points])
        return rate, quality

    def to_tsv(self) -> str:
        rows = ["name\tbpp\tpsnr\tms_ssim"]
        rows += [f"{self.name}\t{p.bpp:.6f}\t{p.psnr:.4f}\t{p.ms_ssim:.6f}" for p in self.points]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> list["RdCurve"]:
        curves: dict[str, RdCurve] = {}
        for line in text.strip().splitlines()[1:]:
            name, bpp, p, m = line.split("\t")
            curves.setdefault(name, cls(name)).add(RdPoint(float(bpp), float(p), float(m)))
        return list(curves.values())


class NoOverlapError(ValueError):
    pass


def bd_rate(anchor_rate, anchor_quality, test_rate, test_quality) -> float:
    """Bjøntegaard delta rate in percent (negative: test needs fewer bits).

    Log-rate is fitted as a polynomial of quality (cubic with >= 4 points,
    degree n-1 below that) and both fits are integrated over the shared
    quality interval.
    """
    ar, aq = np.asarray(anchor_rate, float), np.asarray(anchor_quality, float)
    tr, tq = np.asarray(test_rate, float), np.asarray(test_quality, float)
    n = min(len(ar), len(tr))
    if n < 2:
        raise ValueError("BD-rate needs at least two points per curve")
    if n < 4:
        warnings.warn(f"BD-rate with {n} points per curve: fitting degree {n - 1}", stacklevel=2)
    deg = min(3, n - 1)
    lo = max(aq.min(), tq.min())
    hi = min(aq.max(), tq.max())
    if hi <= lo:
        raise NoOverlapError(f"quality ranges do not overlap ([{aq.min():.4g}, {aq.max():.4g}] "
                             f"vs [{tq.min():.4g}, {tq.max():.4g}])")
    pa = np.polyint(np.polyfit(aq, np.log(ar), deg))
    pt = np.polyint(np.polyfit(tq, np.log(tr), deg))
    avg_a = (np.polyval(pa, hi) - np.polyval(pa, lo)) / (hi - lo)
    avg_t = (np.polyval(pt, hi) - np.polyval(pt, lo)) / (hi - lo)
    return float((np.exp(avg_t - avg_a) - 1) * 100)


def bd_rate_curves(anchor: RdCurve, test: RdCurve, metric: str = "ms_ssim") -> float:
    return bd_rate(*anchor.arrays(metric), *test.arrays(metric))
