"""Procedural toy images and PNG I/O.

Images are float32 arrays of shape (H, W, 3) in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from matplotlib.path import Path as MplPath

KINDS = ("gradient", "blobs", "stripes", "checker", "polygon")
_SS = 4  # supersampling factor for anti-aliased edges


def _color(rng):
    return rng.uniform(0.05, 0.95, size=3)


def _grid(h, w, ss=1):
    yy, xx = np.mgrid[0:h * ss, 0:w * ss].astype(np.float64)
    return (yy + 0.5) / (h * ss), (xx + 0.5) / (w * ss)


def _downsample(img, ss):
    h, w = img.shape[0] // ss, img.shape[1] // ss
    return img.reshape(h, ss, w, ss, -1).mean(axis=(1, 3))


def _gradient(rng, h, w):
    yy, xx = _grid(h, w)
    theta = rng.uniform(0, 2 * np.pi)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    u = (u - u.min()) / (u.max() - u.min() + 1e-12)
    c0, c1 = _color(rng), _color(rng)
    return c0 + u[..., None] * (c1 - c0)


def _blobs(rng, h, w, base):
    yy, xx = _grid(h, w)
    img = base.copy()
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.15, 0.85, 2)
        sigma = rng.uniform(0.08, 0.25)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img = img + g[..., None] * (_color(rng) - img)
    return img


def _stripes(rng, h, w, base):
    yy, xx = _grid(h, w)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(0.15, 0.4)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    s = 0.5 + 0.5 * np.sin(2 * np.pi * u / period + rng.uniform(0, 2 * np.pi))
    return base + s[..., None] * (_color(rng) - base)


def _checker(rng, h, w, base):
    yy, xx = _grid(h, w, _SS)
    cells = rng.integers(2, 5)
    mask = ((np.floor(yy * cells) + np.floor(xx * cells)) % 2).astype(np.float64)
    mask = _downsample(mask[..., None], _SS)[..., 0]
    return base + 0.6 * mask[..., None] * (_color(rng) - base)


def _polygon(rng, h, w, base):
    yy, xx = _grid(h, w, _SS)
    n = rng.integers(3, 7)
    cy, cx = rng.uniform(0.3, 0.7, 2)
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(0.15, 0.35, n)
    verts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], 1)
    pts = np.stack([xx.ravel(), yy.ravel()], 1)
    mask = MplPath(verts).contains_points(pts).reshape(xx.shape).astype(np.float64)
    mask = _downsample(mask[..., None], _SS)[..., 0]
    return base + mask[..., None] * (_color(rng) - base)


def synth_image(rng: np.random.Generator, size: int = 64, kind: str | None = None) -> np.ndarray:
    """One procedural image; every kind sits on a smooth gradient background."""
    kind = kind or KINDS[rng.integers(len(KINDS))]
    base = _gradient(rng, size, size)
    if kind == "gradient":
        img = base
    elif kind == "blobs":
        img = _blobs(rng, size, size, base)
    elif kind == "stripes":
        img = _stripes(rng, size, size, base)
    elif kind == "checker":
        img = _checker(rng, size, size, base)
    elif kind == "polygon":
        img = _polygon(rng, size, size, base)
    else:
        raise ValueError(f"unknown image kind {kind!r}")
    return np.clip(img, 0, 1).astype(np.float32)


def synthetic_corpus(n: int, seed: int = 0, size: int = 64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([synth_image(rng, size) for _ in range(n)])


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    PILImage.fromarray(to_uint8(img), "RGB").save(path)


def load_corpus(source: str | Path, n: int | None = None, seed: int = 0, size: int = 64) -> np.ndarray:
    """Either ``synthetic`` or a directory of PNGs (center-cropped to ``size``)."""
    if str(source) == "synthetic":
        return synthetic_corpus(n or 1000, seed, size)
    files = sorted(Path(source).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG files in {source}")
    imgs = [center_crop(read_png(f), size) for f in files[:n]]
    return np.stack(imgs)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


def resize_short_side_and_crop(img: np.ndarray, short: int = 768) -> np.ndarray:
    """Resize so the shorter side is ``short`` then center-crop a short×short square."""
    h, w = img.shape[:2]
    scale = short / min(h, w)
    nh, nw = max(short, round(h * scale)), max(short, round(w * scale))
    im = PILImage.fromarray(to_uint8(img)).resize((nw, nh), PILImage.BICUBIC)
    return center_crop(np.asarray(im, dtype=np.float32) / 255.0, short)


def write_corpus(directory, images: np.ndarray) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = directory / f"img_{i:05d}.png"
        write_png(p, img)
        paths.append(p)
    return paths
