"""Command-line surface. Every verb is a thin wrapper over a library call."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .corpus import load_corpus, read_png, synthetic_corpus, write_corpus, write_png

log = logging.getLogger("osdiff")


def _images(args) -> np.ndarray:
    if getattr(args, "images", None):
        return load_corpus(args.images, args.limit, args.seed, args.size)
    return synthetic_corpus(args.synthetic_corpus, args.seed, args.size)


def _add_image_source(p):
    src = p.add_argument_group("images")
    src.add_argument("--images", help="directory of PNG files")
    src.add_argument("--synthetic-corpus", type=int, default=20, metavar="N",
                     help="generate N procedural images instead (default 20)")
    src.add_argument("--seed", type=int, default=0)
    src.add_argument("--size", type=int, default=64)
    src.add_argument("--limit", type=int, default=None, help="max images read from --images")


# verbs -----------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    imgs = synthetic_corpus(args.synthetic_corpus, args.seed, args.size)
    paths = write_corpus(args.out, imgs)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def _train_config(args):
    from .training import TrainConfig
    text = Path(args.config).read_text() if args.config else ""
    overrides = {}
    for f in dataclasses.fields(TrainConfig):
        overrides[f.name] = getattr(args, f.name, None)
    if args.synthetic_corpus is not None:
        overrides["corpus"] = "synthetic"
        overrides["corpus_size"] = args.synthetic_corpus
    return TrainConfig.from_text(text, **overrides)


def cmd_train(args) -> int:
    from .training import train
    cfg = _train_config(args)
    images = load_corpus(cfg.corpus, cfg.corpus_size, cfg.seed)
    model, history = train(cfg, images)
    last = history[-1] if history else {}
    print(json.dumps({"model": cfg.out, "hash": model.model_hash().hex(), **last}))
    return 0


def cmd_compress(args) -> int:
    from .codec import compress
    from .model import OSDiffModel
    model = OSDiffModel.load(args.model, inference=True)
    image = read_png(args.input)
    data = compress(image, model, args.seed, args.lambda_id)
    Path(args.output).write_bytes(data)
    h, w = image.shape[:2]
    print(f"bytes\t{len(data)}\nbpp\t{8 * len(data) / (h * w):.6f}")
    return 0


def cmd_decompress(args) -> int:
    from .codec import decompress
    from .model import OSDiffModel
    model = OSDiffModel.load(args.model, inference=True)
    write_png(args.output, decompress(Path(args.input).read_bytes(), model, steps=args.steps))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import rd_curve
    from .model import OSDiffModel
    models = [OSDiffModel.load(m, inference=True) for m in args.model]
    curve = rd_curve(args.name, models, _images(args))
    text = curve.to_tsv()
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_bdrate(args) -> int:
    from .metrics import bd_rate_curves
    anchor = _one_curve(args.anchor)
    test = _one_curve(args.test)
    value = bd_rate_curves(anchor, test, args.metric)
    print(f"anchor\ttest\tmetric\tbd_rate_pct\n{anchor.name}\t{test.name}\t{args.metric}\t{value:.4f}")
    return 0


def _one_curve(path):
    from .metrics import RdCurve
    curves = RdCurve.from_tsv(Path(path).read_text())
    if len(curves) != 1:
        raise SystemExit(f"{path}: expected one curve, found {len(curves)}")
    return curves[0]


def cmd_bench(args) -> int:
    from .evaluation import bench_latency, latency_tsv
    from .model import OSDiffModel
    model = OSDiffModel.load(args.model, inference=True)
    image = read_png(args.input) if args.input else synthetic_corpus(1, args.seed, args.size)[0]
    steps = tuple(int(s) for s in args.steps.split(","))
    sys.stdout.write(latency_tsv(bench_latency(model, image, steps, args.runs, args.seed)))
    return 0


def cmd_inspect(args) -> int:
    from .evaluation import inspect_features
    from .model import OSDiffModel
    model = OSDiffModel.load(args.model, inference=False)
    hist = inspect_features(_images(args), model, args.bins, args.seed, args.t, args.control)
    text = hist.to_tsv()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"# js_divergence_bits\t{hist.js:.6f}", file=sys.stderr if not args.output else sys.stdout)
    return 0


def cmd_ablate(args) -> int:
    from .ablation import bd_table_tsv, run_ablation
    from .model import OSDiffModel
    from .training import build_base_model
    cfg = _train_config(args)
    images = load_corpus(cfg.corpus, cfg.corpus_size, cfg.seed)
    base = OSDiffModel.load(cfg.base_model) if cfg.base_model else build_base_model(cfg, images)
    test = images[-cfg.held_out:]
    result = run_ablation(cfg, base, images, test, args.out_dir,
                          rates=tuple(float(r) for r in args.rates.split(",")))
    sys.stdout.write(bd_table_tsv(result["table"]))
    return 0


# parser ----------------------------------------------------------------------

def _add_train_flags(p):
    from .training import TrainConfig
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--synthetic-corpus", type=int, default=None, metavar="N")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            p.add_argument(flag, dest=f.name, default=None,
                           type=lambda s: s.lower() in ("1", "true", "yes", "on"))
        elif f.type.startswith("int"):
            p.add_argument(flag, dest=f.name, type=int, default=None)
        elif f.type.startswith("float"):
            p.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osdiff", description="One-step diffusion image codec (toy scale)")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-corpus", help="write procedural PNG images")
    p.add_argument("--synthetic-corpus", type=int, required=True, metavar="N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("train", help="pretrain stages and codec training")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("compress", help="PNG -> .osdf bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-id", type=int, default=0)
    p.set_defaults(fn=cmd_compress)

    p = sub.add_parser("decompress", help=".osdf bitstream -> PNG")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--steps", type=int, default=1)
    p.set_defaults(fn=cmd_decompress)

    p = sub.add_parser("eval", help="RD point per model as TSV")
    p.add_argument("--model", required=True, action="append")
    p.add_argument("--name", default="osdiff")
    p.add_argument("--output")
    _add_image_source(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bdrate", help="BD-rate between two RD-curve TSV files")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--metric", default="ms_ssim", choices=("ms_ssim", "psnr"))
    p.set_defaults(fn=cmd_bdrate)

    p = sub.add_parser("bench", help="encode/decode latency")
    p.add_argument("--model", required=True)
    p.add_argument("--input")
    p.add_argument("--steps", default="1,50")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect", help="discriminator feature histograms")
    p.add_argument("--model", required=True)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--control", action="store_true", help="real vs real under fresh noise")
    p.add_argument("--output")
    _add_image_source(p)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("ablate", help="discriminator ablation and BD-rate table")
    _add_train_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--rates", default="1,2")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
