"""Discriminator ablation: {none, pixel, latent} × rate points -> RD curves -> BD-rate table."""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from .evaluation import evaluate
from .metrics import NoOverlapError, RdCurve, bd_rate_curves
from .model import OSDiffModel
from .training import TrainConfig, train

VARIANTS = ("none", "pixel", "latent")
LABELS = {"none": "w/o discriminator", "pixel": "pixel-space discriminator",
          "latent": "latent discriminator"}


def variant_config(cfg: TrainConfig, disc: str, rate: float, out_dir: Path) -> TrainConfig:
    tag = f"{disc}_rate{rate:g}"
    return dataclasses.replace(
        cfg, disc=disc, rate=rate, gan=cfg.gan if disc != "none" else 0.0,
        disc_updates=disc != "none", out=str(out_dir / f"{tag}.osdm"),
        log_path=str(out_dir / f"{tag}.jsonl"))


def run_ablation(cfg: TrainConfig, base: OSDiffModel, images: np.ndarray, test_images: np.ndarray,
                 out_dir, rates=(1.0, 2.0), variants=VARIANTS, reuse: bool = True) -> dict:
    """Train every (variant, rate) pair from the same base model and evaluate it.

    Returns the RD curves, the BD-rate table, and per-run models, RD points
    and per-image results keyed by ``(variant, rate)``.

    With ``reuse`` an existing model file at the variant's output path is
    loaded instead of retrained.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves, models, points, results = {}, {}, {}, {}
    for disc in variants:
        curve = RdCurve(disc)
        for rate in rates:
            vcfg = variant_config(cfg, disc, rate, out_dir)
            path = Path(vcfg.out)
            if reuse and path.exists():
                model = OSDiffModel.load(path)
            else:
                if vcfg.log_path:
                    Path(vcfg.log_path).unlink(missing_ok=True)
                model, _ = train(vcfg, images, base=base)
            models[(disc, rate)] = model
            points[(disc, rate)], results[(disc, rate)] = evaluate(test_images, model)
            curve.add(points[(disc, rate)])
        curves[disc] = curve
    table = bd_table(curves, anchor="none")
    (out_dir / "rd_curves.tsv").write_text(
        "".join(c.to_tsv() if i == 0 else c.to_tsv().split("\n", 1)[1]
                for i, c in enumerate(curves.values())))
    (out_dir / "bd_rate.tsv").write_text(bd_table_tsv(table))
    return {"curves": curves, "table": table, "models": models, "points": points, "results": results}


def bd_table(curves: dict[str, RdCurve], anchor: str = "none") -> list[dict]:
    """BD-rate of every curve against ``anchor``; NaN where the quality ranges do not overlap."""
    rows = []
    for name, curve in curves.items():
        row = {"method": name}
        for metric in ("ms_ssim", "psnr"):
            if name == anchor:
                row[metric] = 0.0
                continue
            try:
                row[metric] = bd_rate_curves(curves[anchor], curve, metric)
            except NoOverlapError:
                row[metric] = math.nan
        rows.append(row)
    return rows


def bd_table_tsv(rows: list[dict]) -> str:
    out = ["method\tbd_rate_ms_ssim_pct\tbd_rate_psnr_pct"]
    for r in rows:
        out.append(f"{r['method']}\t{r['ms_ssim']:.3f}\t{r['psnr']:.3f}")
    return "\n".join(out) + "\n"
