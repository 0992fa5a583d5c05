"""The full OSDiff model bundle and its OSDM model-file round trip."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from torch import nn

from .adversarial import LatentDiscriminator, PixelDiscriminator
from .autoencoder import AutoEncoder
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, make_schedule
from .latent_codec import LatentCodec
from .nn import ParamStore, digest, load_into, named_arrays, pack_tensors, unpack_tensors

DISC_KINDS = ("none", "pixel", "latent")
DEN_PARAMS = ("eps", "v")
_ENUMS = {"disc": DISC_KINDS, "den_param": DEN_PARAMS}


def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass(frozen=True)
class ModelConfig:
    vae_width: int = 32
    codec_width: int = 64
    code_channels: int = 8
    bound: int = 31
    components: int = 3
    den_width: int = 64
    den_blocks: int = 2
    emb_dim: int = 128
    den_param: str = "v"
    t_star: int = 999
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    disc: str = "latent"
    disc_hidden: int = 64
    t_disc: int = 500

    def __post_init__(self):
        # betas travel through the model file as float32
        object.__setattr__(self, "beta_start", _f32(self.beta_start))
        object.__setattr__(self, "beta_end", _f32(self.beta_end))
        if self.disc not in DISC_KINDS:
            raise ValueError(f"disc must be one of {DISC_KINDS}")
        if self.den_param not in DEN_PARAMS:
            raise ValueError(f"den_param must be one of {DEN_PARAMS}")

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(self.den_width, (1, 2), self.den_blocks, self.emb_dim, self.t_star,
                              self.den_param)

    def to_meta(self) -> dict[str, np.ndarray]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in _ENUMS:
                v = _ENUMS[f.name].index(v)
            out[f"meta.{f.name}"] = np.array(v, dtype=np.float32)
        return out

    @classmethod
    def from_meta(cls, tensors) -> "ModelConfig":
        kw = {}
        for f in dataclasses.fields(cls):
            key = f"meta.{f.name}"
            if key not in tensors:
                continue
            v = float(tensors[key])
            if f.name in _ENUMS:
                kw[f.name] = _ENUMS[f.name][int(v)]
            elif f.type in ("int", int):
                kw[f.name] = int(round(v))
            else:
                kw[f.name] = v
        return cls(**kw)


class OSDiffModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), with_control: bool = True):
        super().__init__()
        self.cfg = cfg
        self.vae = AutoEncoder(cfg.vae_width)
        self.codec = LatentCodec(cfg.code_channels, cfg.codec_width, cfg.bound, cfg.components)
        self.schedule: NoiseSchedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.denoiser = Denoiser(cfg.denoiser_config(), self.schedule)
        if with_control:
            self.denoiser.attach_control()
        self.disc: nn.Module | None = None

    def attach_discriminator(self, kind: str | None = None) -> None:
        kind = kind or self.cfg.disc
        if kind == "latent":
            self.disc = LatentDiscriminator(self.denoiser.unet, self.cfg.disc_hidden)
        elif kind == "pixel":
            self.disc = PixelDiscriminator(hidden=self.cfg.disc_hidden)
        else:
            self.disc = None

    @property
    def store(self) -> ParamStore:
        return ParamStore(self)

    @property
    def tables(self) -> np.ndarray | None:
        return self.codec.entropy.tables

    # serialization -----------------------------------------------------

    def inference_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.cfg.to_meta())
        out["meta.has_control"] = np.array(float(self.denoiser.control is not None), np.float32)
        for name in ("vae", "codec", "denoiser"):
            out.update(named_arrays(getattr(self, name), f"{name}."))
        if self.tables is not None:
            out["entropy.cdf_tables"] = self.tables.astype(np.float32)
        return out

    def all_tensors(self) -> dict[str, np.ndarray]:
        out = self.inference_tensors()
        if self.disc is not None:
            out.update(named_arrays(self.disc, "disc."))
        return out

    def _weights_key(self) -> tuple:
        # any in-place update bumps a tensor's _version, any replacement changes its id
        owners = (self.vae, self.codec, self.denoiser, self.denoiser.unet, self.denoiser.control)
        ids = tuple(map(id, owners))
        cached = getattr(self, "_tensor_list", None)
        if cached is None or cached[0] != ids:
            cached = (ids, [t for m in owners[:3] for t in (*m.parameters(), *m.buffers())])
            self._tensor_list = cached
        tensors = cached[1]
        tables = self.tables
        return (self.cfg, self.denoiser.control is not None,
                None if tables is None else (id(tables), tables.tobytes()),
                tuple((id(t), t._version) for t in tensors))

    def model_hash(self) -> bytes:
        """8-byte digest of the inference weights, cached until any of them changes."""
        key = self._weights_key()
        cached = getattr(self, "_hash_cache", None)
        if cached is None or cached[0] != key:
            cached = (key, digest(self.inference_tensors()))
            self._hash_cache = cached
        return cached[1]

    def to_bytes(self) -> bytes:
        return pack_tensors(self.all_tensors())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_tensors(cls, tensors, inference: bool = False) -> "OSDiffModel":
        cfg = ModelConfig.from_meta(tensors)
        has_control = bool(tensors.get("meta.has_control", 1.0))
        model = cls(cfg, with_control=has_control)
        for name in ("vae", "codec", "denoiser"):
            load_into(getattr(model, name), tensors, f"{name}.")
        if "entropy.cdf_tables" in tensors:
            model.codec.entropy.tables = np.rint(tensors["entropy.cdf_tables"]).astype(np.int64)
        if not inference and any(k.startswith("disc.") for k in tensors):
            model.attach_discriminator()
            load_into(model.disc, tensors, "disc.")
        model.eval()
        return model

    @classmethod
    def load(cls, path, inference: bool = False) -> "OSDiffModel":
        with open(path, "rb") as fh:
            return cls.from_tensors(unpack_tensors(fh.read()), inference)


def freeze_for_osdiff(model: OSDiffModel) -> None:
    """Freeze the VAE pair and the denoiser main branch; everything else trains."""
    store = model.store
    for p in model.parameters():
        p.requires_grad_(True)
    store.freeze("vae.")
    store.freeze("denoiser.unet.")
