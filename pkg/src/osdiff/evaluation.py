"""Evaluation harnesses: RD points, rate-estimate audit, latent gains, latency, feature histograms."""

from __future__ import annotations

import statistics
import time
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .autoencoder import encode, images_to_tensor
from .bitstream import unpack_bitstream
from .codec import analyse, compress, decode_code, decompress
from .corpus import to_uint8
from .denoiser import decode_multi_step, decode_one_step
from .diffusion import forward_diffuse
from .latent_codec import estimate_rate, quantize
from .metrics import RdCurve, RdPoint, ms_ssim, psnr
from .model import OSDiffModel
from .nn import Rng


@dataclass
class ImageResult:
    bpp: float
    psnr: float
    ms_ssim: float
    est_bits: list[float]
    coded_bits: list[int]


def evaluate_image(image: np.ndarray, model: OSDiffModel, seed: int = 0) -> ImageResult:
    h, w = image.shape[:2]
    data = compress(image, model, seed)
    recon = decompress(data, model)
    ref, rec = to_uint8(image) / 255.0, to_uint8(recon) / 255.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        q = ms_ssim(ref, rec)
    y_hat = analyse(image, model)
    with torch.no_grad():
        est = estimate_rate(y_hat, model.codec.entropy, per_channel=True).double().numpy()
    _, payload_bits = coded_channel_bits(data, model)
    return ImageResult(8 * len(data) / (h * w), psnr(ref, rec), q, est.tolist(), payload_bits)


def coded_channel_bits(data: bytes, model: OSDiffModel):
    stream = unpack_bitstream(data, model.model_hash())
    return stream.header, [8 * len(p) for p in stream.payloads]


def evaluate(images: np.ndarray, model: OSDiffModel, seed: int = 0) -> tuple[RdPoint, list[ImageResult]]:
    results = [evaluate_image(img, model, seed) for img in images]
    finite = [r.psnr for r in results if np.isfinite(r.psnr)]
    point = RdPoint(float(np.mean([r.bpp for r in results])),
                    float(np.mean(finite)) if finite else float("inf"),
                    float(np.mean([r.ms_ssim for r in results])))
    return point, results


def rate_agreement(results: list[ImageResult]) -> dict:
    """Worst-case |estimate - coded| against the 1 % + 32 bit allowance, per channel stream."""
    worst_excess = -np.inf
    streams = 0
    for r in results:
        for est, coded in zip(r.est_bits, r.coded_bits):
            allowed = 0.01 * coded + 32
            worst_excess = max(worst_excess, abs(est - coded) - allowed)
            streams += 1
    return {"streams": streams, "worst_excess_bits": float(worst_excess), "ok": worst_excess <= 0}


@torch.no_grad()
def latent_gains(images: np.ndarray, model: OSDiffModel, seed: int = 0) -> dict:
    """Mean squared distance of y_c and of y_r from the clean latent y0."""
    d_c, d_r = [], []
    for i, img in enumerate(images):
        y0 = encode(images_to_tensor(img), model.vae)
        y_c = model.codec.synthesis(quantize(model.codec.analysis(y0), "hard", model.cfg.bound))
        y_r = decode_one_step(y_c, model.cfg.t_star, seed + i, model.denoiser, model.schedule)
        d_c.append(float(torch.mean((y0 - y_c) ** 2)))
        d_r.append(float(torch.mean((y0 - y_r) ** 2)))
    return {"mse_yc": float(np.mean(d_c)), "mse_yr": float(np.mean(d_r)), "n": len(images)}


def _median_time(fn, runs: int) -> float:
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


@torch.no_grad()
def bench_latency(model: OSDiffModel, image: np.ndarray, steps_list=(1, 50), runs: int = 20,
                  seed: int = 0) -> dict:
    """Median wall-clock of encoding and of decoding at each step count.

    ``decode_s`` is the full decompress path; ``denoise_s`` isolates the
    diffusion decode from y_c to y_r.
    """
    torch.set_num_threads(1)
    data = compress(image, model, seed)
    _, y_hat = decode_code(data, model)
    y_c = model.codec.synthesis(y_hat)
    compress(image, model, seed)  # warm-up
    report = {"encode_s": _median_time(lambda: compress(image, model, seed), runs), "steps": {}}
    for n in steps_list:
        den = model.denoiser
        den.evaluations = 0
        decompress(data, model, steps=n)
        count = den.evaluations
        if n == 1:
            denoise = lambda: decode_one_step(y_c, model.cfg.t_star, seed, den, model.schedule)
        else:
            denoise = lambda n=n: decode_multi_step(y_c, n, seed, den, model.schedule, model.cfg.t_star)
        report["steps"][n] = {
            "evaluations": count,
            "decode_s": _median_time(lambda n=n: decompress(data, model, steps=n), runs),
            "denoise_s": _median_time(denoise, runs),
        }
    base = report["steps"].get(1)
    if base:
        for n, row in report["steps"].items():
            row["decode_ratio"] = row["decode_s"] / base["decode_s"]
            row["denoise_ratio"] = row["denoise_s"] / base["denoise_s"]
    return report


def latency_tsv(report: dict) -> str:
    rows = ["steps\tevaluations\tencode_s\tdecode_s\tdenoise_s\tdecode_ratio\tdenoise_ratio"]
    for n, r in report["steps"].items():
        rows.append(f"{n}\t{r['evaluations']}\t{report['encode_s']:.6f}\t{r['decode_s']:.6f}\t"
                    f"{r['denoise_s']:.6f}\t{r.get('decode_ratio', 1):.3f}\t{r.get('denoise_ratio', 1):.3f}")
    return "\n".join(rows) + "\n"


# feature distributions ---------------------------------------------------------

def js_divergence(p_counts, q_counts) -> float:
    """Jensen–Shannon divergence in bits between two histograms."""
    p = np.asarray(p_counts, float)
    q = np.asarray(q_counts, float)
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


@dataclass
class FeatureHistogram:
    edges: np.ndarray
    real: np.ndarray
    generated: np.ndarray

    @property
    def js(self) -> float:
        return js_divergence(self.real, self.generated)

    def to_tsv(self) -> str:
        rows = ["bin_lo\tbin_hi\treal\tgenerated"]
        for lo, hi, a, b in zip(self.edges[:-1], self.edges[1:], self.real, self.generated):
            rows.append(f"{lo:.6g}\t{hi:.6g}\t{int(a)}\t{int(b)}")
        return "\n".join(rows) + "\n"


@torch.no_grad()
def inspect_features(images: np.ndarray, model: OSDiffModel, bins: int = 64, seed: int = 0,
                     t: int | None = None, control: bool = False) -> FeatureHistogram:
    """Histogram f_d middle activations for noisy real latents vs noisy generated ones.

    With ``control=True`` the "generated" side is the real latent under an
    independent noise draw, which should give near-identical histograms.
    """
    rng = Rng(seed)
    feats = model.disc.features if model.disc is not None and hasattr(model.disc, "features") \
        else model.denoiser.unet.inputs
    t = t or model.cfg.t_disc // 2
    real, fake = [], []
    for i, img in enumerate(images):
        y0 = encode(images_to_tensor(img), model.vae)
        if control:
            other = y0
        else:
            y_c = model.codec.synthesis(quantize(model.codec.analysis(y0), "hard", model.cfg.bound))
            other = decode_one_step(y_c, model.cfg.t_star, seed + i, model.denoiser, model.schedule)
        y0_t = forward_diffuse(y0, t, rng.normal(y0.shape), model.schedule)
        yr_t = forward_diffuse(other, t, rng.normal(y0.shape), model.schedule)
        real.append(feats(y0_t, t)[1].ravel().numpy())
        fake.append(feats(yr_t, t)[1].ravel().numpy())
    real, fake = np.concatenate(real), np.concatenate(fake)
    lo, hi = np.percentile(np.concatenate([real, fake]), [0.5, 99.5])
    edges = np.linspace(lo, hi, bins + 1)
    return FeatureHistogram(edges, np.histogram(np.clip(real, lo, hi), edges)[0],
                            np.histogram(np.clip(fake, lo, hi), edges)[0])


def rd_curve(name: str, models: list[OSDiffModel], images: np.ndarray, seed: int = 0) -> RdCurve:
    curve = RdCurve(name)
    for m in models:
        curve.add(evaluate(images, m, seed)[0])
    return curve
