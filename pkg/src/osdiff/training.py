"""Generator/discriminator objectives and the alternating training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adversarial import discriminator_loss, generator_gan_loss, sample_noisy_pair
from .autoencoder import (
    VaeConfig,
    decode,
    encode,
    images_to_tensor,
    pretrain_vae,
)
from .corpus import load_corpus
from .diffusion import forward_diffuse, noise_prediction_loss, one_step_sample
from .latent_codec import EntropyModel, estimate_rate, fit_cdf_tables, quantize
from .model import ModelConfig, OSDiffModel, freeze_for_osdiff
from .nn import Adam, NonFiniteError, ParamStore, Rng, backward

log = logging.getLogger(__name__)

METRIC_FIELDS = ("L_diff", "L_rate", "L_feature", "L_G", "L_D", "bpp_est")
DIVERGENCE_LIMIT = 1e4


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    diff: float = 1.0
    rate: float = 1.0
    feature: float = 2.0
    gan: float = 0.01

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


def generator_total_loss(y0, y_r, y_c, noisy_code, score_fake, w: LossWeights,
                         entropy_model: EntropyModel, num_pixels: int):
    """Weighted sum of the diffusion, rate, feature and GAN terms.

    The rate term is in bits per image pixel; ``score_fake=None`` drops the
    GAN term. Returns ``(total, components)``.
    """
    l_diff = torch.mean((y0 - y_r) ** 2)
    l_rate = estimate_rate(noisy_code, entropy_model) / num_pixels
    l_feature = torch.mean((y0 - y_c) ** 2)
    l_g = generator_gan_loss(score_fake) if score_fake is not None else torch.zeros((), dtype=y0.dtype)
    total = w.diff * l_diff + w.rate * l_rate + w.feature * l_feature + w.gan * l_g
    return total, {"L_diff": l_diff, "L_rate": l_rate, "L_feature": l_feature, "L_G": l_g}


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 5000
    lr: float = 1e-4
    disc_lr: float | None = None
    lr_schedule: str = "constant"   # or "cosine": decays to zero over ``steps``
    control_lr: float | None = None  # control branch lr; None means ``lr``
    seed: int = 0
    corpus: str = "synthetic"
    corpus_size: int = 2000
    held_out: int = 100
    rate: float = 1.0          # lambda_2
    diff: float = 1.0          # lambda_1
    feature: float = 2.0       # lambda_3
    gan: float = 0.01          # lambda_4
    disc: str = "latent"
    disc_warmup: int = 500
    disc_updates: bool = True
    checkpoint_every: int = 1000
    out: str = "osdiff.osdm"
    log_path: str | None = None
    base_model: str | None = None
    vae_steps: int = 3000
    vae_lr: float = 1e-3
    den_pretrain_steps: int = 2000
    den_pretrain_lr: float = 1e-3
    # architecture
    vae_width: int = 32
    codec_width: int = 64
    den_width: int = 64
    den_blocks: int = 2
    emb_dim: int = 128
    den_param: str = "v"
    t_star: int = 999
    t_disc: int = 500

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.diff, self.rate, self.feature, self.gan)

    def model_config(self) -> ModelConfig:
        return ModelConfig(vae_width=self.vae_width, codec_width=self.codec_width,
                           den_width=self.den_width, den_blocks=self.den_blocks,
                           emb_dim=self.emb_dim, den_param=self.den_param, t_star=self.t_star, disc=self.disc,
                           t_disc=self.t_disc)

    @property
    def lambda_id(self) -> int:
        """Rate-point tag carried in the bitstream header (lambda_2 in quarter units)."""
        return int(round(self.rate * 4)) & 0xFF

    # key = value text files
    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip().replace("-", "_"), value.strip()
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            kw[key] = _coerce(value, types[key])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def _coerce(value: str, typ: str):
    if value in ("None", ""):
        return None
    if "bool" in typ:
        return value.lower() in ("1", "true", "yes", "on")
    if typ.startswith("int"):
        return int(value)
    if typ.startswith("float"):
        return float(value)
    return value


# ---------------------------------------------------------------------------

@dataclass
class Optimizers:
    gen: Adam
    disc: Adam | None


def make_optimizers(model: OSDiffModel, cfg: TrainConfig) -> Optimizers:
    store = model.store
    gen = GeneratorOpt(Adam(store, lr=cfg.lr, prefix="codec."),
                       Adam(store, lr=cfg.control_lr or cfg.lr, prefix="denoiser.control."))
    disc = Adam(store, lr=cfg.disc_lr or cfg.lr, prefix="disc.") if model.disc is not None else None
    return Optimizers(gen, disc)


@dataclass
class GeneratorOpt:
    """Codec and control-branch optimizers stepped together."""

    codec: Adam
    control: Adam

    def step(self):
        self.codec.step()
        self.control.step()


def generator_forward(model: OSDiffModel, x: torch.Tensor, rng: Rng, quant: str = "ste"):
    """Encode -> analysis -> quantize -> synthesis -> one-step denoise. Returns a dict of tensors."""
    cfg = model.cfg
    with torch.no_grad():
        y0 = encode(x, model.vae)
    v = model.codec.analysis(y0)
    noisy = quantize(v, "noise", cfg.bound, rng).clamp(-cfg.bound, cfg.bound)
    y_hat = quantize(v, quant, cfg.bound, rng)
    y_c = model.codec.synthesis(y_hat)
    eps = rng.normal(y_c.shape, y_c.dtype)
    y_t = forward_diffuse(y_c, cfg.t_star, eps, model.schedule)
    eps_hat = model.denoiser(y_t, y_c, cfg.t_star)
    y_r = one_step_sample(y_t, eps_hat, cfg.t_star, model.schedule)
    return {"y0": y0, "v": v, "noisy": noisy, "y_c": y_c, "y_r": y_r}


def _scores(model: OSDiffModel, x, out, rng, detach: bool):
    """Fake and real discriminator scores for the current batch."""
    y_r = out["y_r"].detach() if detach else out["y_r"]
    if model.cfg.disc == "pixel":
        fake = decode(y_r, model.vae, clamp=False)
        return model.disc(fake), (model.disc(x) if detach else None)
    pair = sample_noisy_pair(out["y0"], y_r, model.schedule, rng, model.cfg.t_disc)
    fake = model.disc(pair.yr_t, pair.t)
    return fake, (model.disc(pair.y0_t, pair.t) if detach else None)


def train_step(x: torch.Tensor, model: OSDiffModel, opts: Optimizers, w: LossWeights, rng: Rng,
               update_disc: bool = True) -> dict[str, float]:
    """One generator update followed by one discriminator update."""
    store = model.store
    num_pixels = x.shape[0] * x.shape[2] * x.shape[3]
    use_gan = model.disc is not None and w.gan > 0

    store.zero_grad()
    out = generator_forward(model, x, rng)
    score_fake = _scores(model, x, out, rng, detach=False)[0] if use_gan else None
    total, parts = generator_total_loss(out["y0"], out["y_r"], out["y_c"], out["noisy"], score_fake,
                                        w, model.codec.entropy, num_pixels)
    _check_loss(total, parts)
    backward(total)
    opts.gen.step()

    l_d = float("nan")
    if model.disc is not None and update_disc:
        store.zero_grad()
        fake, real = _scores(model, x, out, rng, detach=True)
        loss_d = discriminator_loss(fake, real)
        _check_loss(loss_d, {"L_D": loss_d})
        backward(loss_d)
        opts.disc.step()
        l_d = loss_d.item()
    store.zero_grad()

    metrics = {k: v.item() for k, v in parts.items()}
    metrics["L_D"] = l_d
    metrics["bpp_est"] = metrics["L_rate"]
    return {k: metrics[k] for k in METRIC_FIELDS}


def _check_loss(total, parts):
    for name, v in parts.items():
        if not torch.isfinite(v):
            raise NonFiniteError(name, f"value {v.item()}")
    if total.item() > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"loss {total.item():.4g} exceeded {DIVERGENCE_LIMIT:g}")


# pretraining stages ----------------------------------------------------------

def normalize_latents(model: OSDiffModel, images: np.ndarray) -> float:
    """Rescale the frozen encoder/decoder pair so latents have unit standard deviation."""
    with torch.no_grad():
        y = torch.cat([encode(images_to_tensor(images[i:i + 100]), model.vae)
                       for i in range(0, len(images), 100)])
        std = float(y.std())
        scale = 1.0 / std
        model.vae.encoder.conv_out.weight.mul_(scale)
        model.vae.encoder.conv_out.bias.mul_(scale)
        model.vae.decoder.conv_in.weight.mul_(std)
    return scale


def pretrain_denoiser(model: OSDiffModel, images: np.ndarray, steps: int, lr: float, batch: int,
                      seed: int, on_step=None) -> list[float]:
    """Unconditional noise-prediction training of the main branch on clean latents."""
    den = model.denoiser
    store = ParamStore(den.unet)
    for p in den.unet.parameters():
        p.requires_grad_(True)
    opt = Adam(store, lr=lr)
    rng = Rng(seed)
    with torch.no_grad():
        latents = torch.cat([encode(images_to_tensor(images[i:i + 100]), model.vae)
                             for i in range(0, len(images), 100)])
    losses = []
    for step in range(steps):
        opt.lr = lr * 0.5 * (1 + math.cos(math.pi * step / max(1, steps)))
        y0 = latents[torch.from_numpy(rng.integers(0, len(latents), batch))]
        t = rng.integers(1, model.schedule.T + 1, size=batch)
        eps = rng.normal(y0.shape)
        y_t = forward_diffuse(y0, t, eps, model.schedule)
        store.zero_grad()
        loss = noise_prediction_loss(eps, den(y_t, None, t))
        backward(loss, store)
        opt.step()
        losses.append(loss.item())
        if on_step:
            on_step(step, loss.item())
    store.freeze()
    return losses


def build_base_model(cfg: TrainConfig, images: np.ndarray, log_fn=None) -> OSDiffModel:
    """VAE pretraining (with gate), latent normalisation and denoiser pretraining."""
    model = OSDiffModel(cfg.model_config(), with_control=False)
    vcfg = VaeConfig(width=cfg.vae_width, steps=cfg.vae_steps, lr=cfg.vae_lr, seed=cfg.seed,
                     batch_size=cfg.batch_size)
    held = images[-cfg.held_out:]
    vae, hist = pretrain_vae(images[:-cfg.held_out], vcfg, held_out=held, vae=model.vae)
    if log_fn:
        log_fn({"stage": "vae", "psnr_db": hist["psnr_db"], "epoch_loss": hist["epoch_loss"]})
    normalize_latents(model, images[:-cfg.held_out])
    losses = pretrain_denoiser(model, images[:-cfg.held_out], cfg.den_pretrain_steps,
                               cfg.den_pretrain_lr, cfg.batch_size, cfg.seed + 1)
    if log_fn:
        log_fn({"stage": "denoiser", "first_loss": float(np.mean(losses[:50])),
                "last_loss": float(np.mean(losses[-50:]))})
    return model


def prepare_for_osdiff(base: OSDiffModel, cfg: TrainConfig) -> OSDiffModel:
    """Copy of ``base`` with a fresh control branch and discriminator, frozen where required."""
    # the codec is trained from scratch here, so its width comes from the run config
    mcfg = dataclasses.replace(base.cfg, disc=cfg.disc, t_star=cfg.t_star, t_disc=cfg.t_disc,
                               codec_width=cfg.codec_width)
    model = OSDiffModel(mcfg, with_control=False)
    model.load_state_dict({k: v for k, v in base.state_dict().items() if not k.startswith("codec.")},
                          strict=False)
    torch.manual_seed(cfg.seed)
    model.codec = type(base.codec)(mcfg.code_channels, mcfg.codec_width, mcfg.bound, mcfg.components)
    model.denoiser.attach_control()
    model.attach_discriminator(cfg.disc)
    freeze_for_osdiff(model)
    return model


class JsonlLog:
    def __init__(self, path):
        self.fh = open(path, "a") if path else None

    def __call__(self, record: dict) -> None:
        record = {"time": round(time.time(), 3), **record}
        if self.fh:
            self.fh.write(json.dumps(record) + "\n")
            self.fh.flush()
        log.debug("%s", record)

    def close(self):
        if self.fh:
            self.fh.close()


def train(cfg: TrainConfig, images: np.ndarray | None = None,
          base: OSDiffModel | None = None) -> tuple[OSDiffModel, list[dict]]:
    """Run the full recipe; writes checkpoints and the final model to ``cfg.out``."""
    torch.manual_seed(cfg.seed)
    if images is None:
        images = load_corpus(cfg.corpus, cfg.corpus_size, cfg.seed)
    logger = JsonlLog(cfg.log_path)
    if base is None:
        if cfg.base_model:
            base = OSDiffModel.load(cfg.base_model)
        else:
            base = build_base_model(cfg, images, logger)
    model = prepare_for_osdiff(base, cfg)
    opts = make_optimizers(model, cfg)
    rng = Rng(cfg.seed + 2)
    data = images_to_tensor(images[:-cfg.held_out])
    history = []
    out_path = Path(cfg.out)
    last_good = None
    try:
        for step in range(cfg.steps):
            scale = lr_scale(cfg.lr_schedule, step, cfg.steps)
            opts.gen.codec.lr = cfg.lr * scale
            opts.gen.control.lr = (cfg.control_lr or cfg.lr) * scale
            if opts.disc is not None:
                opts.disc.lr = (cfg.disc_lr or cfg.lr) * scale
            gan = cfg.gan if step >= cfg.disc_warmup else 0.0
            w = dataclasses.replace(cfg.weights, gan=gan)
            x = data[torch.from_numpy(rng.integers(0, len(data), cfg.batch_size))]
            metrics = train_step(x, model, opts, w, rng, update_disc=cfg.disc_updates)
            record = {"step": step, **metrics}
            history.append(record)
            logger(record)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                fit_cdf_tables(model.codec.entropy)
                last_good = _checkpoint(model, out_path, step + 1)
    except (TrainingDiverged, NonFiniteError) as exc:
        logger({"event": "aborted", "reason": str(exc), "last_checkpoint": str(last_good)})
        logger.close()
        raise
    fit_cdf_tables(model.codec.entropy)
    model.eval()
    if cfg.out:
        model.save(out_path)
    logger({"event": "done", "steps": cfg.steps, "model": str(out_path)})
    logger.close()
    return model, history


def lr_scale(schedule: str, step: int, steps: int) -> float:
    if schedule == "constant":
        return 1.0
    if schedule == "cosine":
        return 0.5 * (1 + math.cos(math.pi * step / max(1, steps)))
    raise ValueError(f"unknown lr schedule {schedule!r}")


def _checkpoint(model, out_path: Path, step: int) -> Path:
    path = out_path.with_name(f"{out_path.stem}.step{step}{out_path.suffix}")
    model.save(path)
    return path
