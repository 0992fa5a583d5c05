"""End-to-end compress / decompress."""

from __future__ import annotations

import numpy as np
import torch

from .autoencoder import check_image_dims, decode, encode, images_to_tensor, tensor_to_images
from .bitstream import BitstreamError, Header, pack_bitstream, unpack_bitstream
from .denoiser import decode_multi_step, decode_one_step
from .entropy_coder import range_decode, range_encode
from .latent_codec import quantize
from .model import OSDiffModel


class CodecError(ValueError):
    pass


def _require_tables(model: OSDiffModel) -> np.ndarray:
    if model.tables is None:
        raise CodecError("model has no frozen entropy tables; run fit_cdf_tables first")
    return model.tables


@torch.no_grad()
def analyse(image: np.ndarray, model: OSDiffModel) -> torch.Tensor:
    """Hard-quantized code grid ŷ (1×C×h×w, integer valued) for one H×W×3 image."""
    h, w = image.shape[:2]
    check_image_dims(h, w)
    x = images_to_tensor(image)
    return quantize(model.codec.analysis(encode(x, model.vae)), "hard", model.cfg.bound)


@torch.no_grad()
def compress(image: np.ndarray, model: OSDiffModel, seed: int = 0, lambda_id: int = 0) -> bytes:
    tables = _require_tables(model)
    h, w = image.shape[:2]
    y_hat = analyse(image, model)
    symbols = (y_hat[0].to(torch.int64) + model.cfg.bound).numpy()
    payloads = [range_encode(symbols[c].ravel().tolist(), tables[c]) for c in range(symbols.shape[0])]
    header = Header(width=w, height=h, channels=symbols.shape[0], bound=model.cfg.bound,
                    t_star=model.cfg.t_star, seed=seed, lambda_id=lambda_id,
                    model_hash=model.model_hash())
    return pack_bitstream(header, payloads)


@torch.no_grad()
def decode_code(data: bytes, model: OSDiffModel) -> tuple[Header, torch.Tensor]:
    """Unpack and entropy-decode to the integer code grid."""
    tables = _require_tables(model)
    stream = unpack_bitstream(data, expected_hash=model.model_hash())
    hd = stream.header
    if hd.channels != model.cfg.code_channels or hd.bound != model.cfg.bound:
        raise BitstreamError("header geometry does not match the model")
    check_image_dims(hd.height, hd.width)
    ch, cw = hd.height // 8, hd.width // 8
    grid = np.empty((hd.channels, ch * cw), dtype=np.int64)
    for c, payload in enumerate(stream.payloads):
        grid[c] = range_decode(payload, ch * cw, tables[c])
    y_hat = torch.from_numpy(grid - hd.bound).float().reshape(1, hd.channels, ch, cw)
    return hd, y_hat


@torch.no_grad()
def decompress(data: bytes, model: OSDiffModel, steps: int = 1) -> np.ndarray:
    """Reconstruct an H×W×3 image in [0, 1]; ``steps > 1`` runs the multi-step chain instead."""
    hd, y_hat = decode_code(data, model)
    y_c = model.codec.synthesis(y_hat)
    if steps == 1:
        y_r = decode_one_step(y_c, hd.t_star, hd.seed, model.denoiser, model.schedule)
    else:
        y_r = decode_multi_step(y_c, steps, hd.seed, model.denoiser, model.schedule, hd.t_star)
    return tensor_to_images(decode(y_r, model.vae))[0]


def bits_per_pixel(data: bytes, height: int, width: int) -> float:
    return 8 * len(data) / (height * width)
