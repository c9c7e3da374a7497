"""Command-line entry point: ``tokd <subcommand> ...`` (or ``python -m tokd``).

Training config files are ``key = value`` lines (``#`` starts a comment).
Recognized keys and their defaults:

Model
    d_model = 64            token width
    n_layers = 4            transformer blocks
    n_heads = 4             attention heads (must divide d_model)
    patch = 8               patch side in pixels
    variant = tokd_plus     plain | tokd | tokd_plus
    image_size = 32x32      HxW; must match the dataset
    n_sources = 2           source views per example
    d_style = (d_model)     style-vector width
    ffn_mult = 4            FFN hidden width multiple
    perceptual = off        off | grad (gradient-difference proxy loss)
    lambda_perceptual = 0.5 weight of the proxy loss
    dtype = float32         float32 | float64

Optimization
    lr_peak = 1e-3          peak learning rate
    beta1 = 0.9, beta2 = 0.95
    weight_decay = 0.05     decoupled; norm parameters are exempt
    eps = 1e-8
    warmup_steps = 100      linear warmup length
    total_steps = 2000      linear decay reaches zero here
    ema_decay = 0.99
    batch_size = 4
    grad_clip = none        global-norm clip, or none
    log_every = 100
    scheme = clean_target   clean_target | naive
    seed = 0
    checkpoint_every = 0    also save every N steps (0 = only at the end)
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .analysis import count_params_flops, pca_dump
from .blocks import BlockVariant
from .datapipe import GenConfig, assemble_batch, eval_example, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, DataError, TokdError
from .evaluation import evaluate
from .experiments import AblationSpec, run_ablation
from .model import PAPER_CONFIG, TINY_CONFIG, ModelConfig, forward_batch, init_params
from .trainer import TrainHParams, loss_and_grads, sample_batch, train

log = logging.getLogger("tokd")

MODEL_KEYS = {"d_model": int, "n_layers": int, "n_heads": int, "patch": int, "variant": str, "n_sources": int,
              "d_style": int, "ffn_mult": int, "perceptual": str, "lambda_perceptual": float, "dtype": str}
TRAIN_KEYS = {"lr_peak": float, "weight_decay": float, "eps": float, "warmup_steps": int, "total_steps": int,
              "ema_decay": float, "batch_size": int, "log_every": int, "scheme": str}
DESK_MODEL = ModelConfig(d_model=64, n_layers=4, n_heads=4, patch=8, image_size=(32, 32))
PRESETS = {"paper": PAPER_CONFIG, "desk": DESK_MODEL, "tiny": TINY_CONFIG}


def _parse_size(text: str) -> tuple:
    parts = text.lower().replace(",", "x").split("x")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"image_size must look like 32x32, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise ConfigError(f"image_size must look like 32x32, got {text!r}")
    return vals


def parse_train_config(text: str, source: str = "<config>") -> tuple[ModelConfig, TrainHParams, dict]:
    """Parse a key=value training config into (model config, hyperparameters, run options)."""
    model, hp, run = {}, {}, {"seed": 0, "checkpoint_every": 0}
    betas = list(TrainHParams().betas)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        try:
            if key in MODEL_KEYS:
                model[key] = MODEL_KEYS[key](value)
            elif key == "image_size":
                model[key] = _parse_size(value)
            elif key in TRAIN_KEYS:
                hp[key] = TRAIN_KEYS[key](value)
            elif key in ("beta1", "beta2"):
                betas[key == "beta2"] = float(value)
            elif key == "grad_clip":
                hp[key] = None if value.lower() in ("none", "0", "") else float(value)
            elif key in run:
                run[key] = int(value)
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
    hp["betas"] = tuple(betas)
    base = DESK_MODEL
    return base.replace(**model), TrainHParams(**hp), run


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    gen = GenConfig(size=args.size, n_views=args.views, severity=args.severity)
    records = generate_dataset(args.scenes, args.seed, gen, synthetic_frac=args.synthetic_frac, n_test=args.test)
    save_dataset(records, args.out)
    print(f"wrote {len(records)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc.strerror or exc}") from None
        cfg, hp, run = parse_train_config(text, args.config)
    else:
        cfg, hp, run = DESK_MODEL, TrainHParams(), {"seed": 0, "checkpoint_every": 0}
    if args.steps is not None:
        hp = hp.replace(total_steps=args.steps, warmup_steps=min(hp.warmup_steps, args.steps))
    seed = run["seed"] if args.seed is None else args.seed
    records = load_dataset(args.data, "train")
    if not records:
        raise DataError(f"no training scenes under {args.data}")
    resume = ckpt_io.load(args.resume) if args.resume else None
    res = train(records, cfg, hp, seed, resume=resume, stop_at=args.stop_at, metrics_path=args.metrics,
                checkpoint_path=args.out, checkpoint_every=run["checkpoint_every"])
    last = res.metrics[-1] if res.metrics else None
    msg = f"saved step {res.checkpoint.step} checkpoint to {args.out}"
    if last:
        msg += f" (loss {last['loss']:.5f}, train psnr ema {last['psnr_ema']:.2f} dB)"
    print(msg)
    return 0


def cmd_eval(args) -> int:
    ck = ckpt_io.load(args.checkpoint)
    records = load_dataset(args.data, args.split)
    if not records:
        raise DataError(f"no {args.split} scenes under {args.data}")
    params = ck.params if args.raw else ck.ema
    report = evaluate(params, ck.config, records)
    if args.out:
        report.write_csv(args.out)
    print(f"{report.count} scenes: psnr {report.mean_psnr:.3f} dB, ssim {report.mean_ssim:.4f}")
    return 0


def cmd_pca(args) -> int:
    ck = ckpt_io.load(args.checkpoint)
    records = load_dataset(args.data, args.split)
    if args.scene:
        records = [r for r in records if r.scene_id == args.scene]
    if not records:
        raise DataError(f"scene {args.scene or '(any)'} not found in {args.data} split {args.split}")
    cfg = ck.config
    batch = assemble_batch([eval_example(records[0], cfg.n_sources)], cfg.np_dtype)
    _, feats = forward_batch(ck.ema, cfg, batch["src_images"], batch["src_rays"], batch["tgt_rays"], capture=True)
    stats = pca_dump(feats, cfg, args.out)
    for layer, sim in enumerate(stats["similarity"]):
        print(f"layer {layer}: source-target cosine {sim:.4f}")
    return 0


def cmd_bench(args) -> int:
    cfg = PRESETS[args.preset]
    if args.image_size:
        cfg = cfg.replace(image_size=_parse_size(args.image_size))
    rows = {}
    for v in BlockVariant:
        c = count_params_flops(cfg.replace(variant=v))
        rows[v] = c
        print(f"{v.value:10s} params {c['params']:>13,d}  GFLOPs {c['flops'] / 1e9:12.4f}  tokens {c['tokens']}")
    plain, plus = rows[BlockVariant.PLAIN], rows[BlockVariant.TOKD_PLUS]
    print(f"tokd_plus / plain: FLOPs x{plus['flops'] / plain['flops']:.5f}, params x{plus['params'] / plain['params']:.5f}")
    if args.time_steps:
        records = generate_dataset(8, 0, GenConfig(size=cfg.image_size[0]))
        hp = TrainHParams(batch_size=args.batch)
        for v in BlockVariant:
            vcfg = cfg.replace(variant=v)
            params = init_params(vcfg, ad.Rng(0))
            batch = sample_batch(records, vcfg, hp, 0, 0)
            loss_and_grads(params, vcfg, batch)
            t0 = time.perf_counter()
            for step in range(args.time_steps):
                loss_and_grads(params, vcfg, sample_batch(records, vcfg, hp, 0, step))
            ms = 1000 * (time.perf_counter() - t0) / args.time_steps
            print(f"{v.value:10s} {ms:8.1f} ms per forward+backward step (batch {args.batch})")
    return 0


def cmd_ablate(args) -> int:
    spec = AblationSpec(steps=args.steps, seeds=args.seeds, n_scenes=args.scenes, n_test=args.test,
                        data_seed=args.data_seed)
    t0 = time.perf_counter()
    results = run_ablation(spec, out_dir=args.out, pca_dir=Path(args.out) / "pca" if args.pca else None)
    for (variant, column), cell in results.items():
        print(f"{variant.value:10s} {column:24s} median psnr {cell.median_psnr:.3f}  cos(last2) "
              f"{np.mean(cell.cos_last2):.4f}")
    print(f"wrote {Path(args.out) / 'ablation.csv'} in {time.perf_counter() - t0:.0f} s")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tokd", description="Token-disentangled novel-view-synthesis transformer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a procedural dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=64, help="training scenes")
    g.add_argument("--test", type=int, default=16, help="held-out scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=32, help="square image side in pixels")
    g.add_argument("--views", type=int, default=8)
    g.add_argument("--synthetic-frac", type=float, default=0.0, help="share of artifact-injected synthetic scenes")
    g.add_argument("--severity", type=float, default=0.5)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model", description=__doc__,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--stop-at", type=int, help="stop early at this step without changing the schedule")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--metrics", help="append per-step metrics CSV here")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on held-out scenes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", help="per-scene CSV")
    e.add_argument("--raw", action="store_true", help="use raw instead of EMA weights")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("pca", help="dump per-layer 3-channel PCA images")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--split", default="test")
    c.add_argument("--scene")
    c.set_defaults(func=cmd_pca)

    b = sub.add_parser("bench", help="parameter/FLOP counts and optional step timing")
    b.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    b.add_argument("--image-size")
    b.add_argument("--time-steps", type=int, default=0)
    b.add_argument("--batch", type=int, default=4)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="variant x data-scheme ablation grid")
    a.add_argument("--out", required=True)
    a.add_argument("--steps", type=int, default=2000)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--scenes", type=int, default=64)
    a.add_argument("--test", type=int, default=32)
    a.add_argument("--data-seed", type=int, default=7)
    a.add_argument("--pca", action="store_true", help="also dump PCA images for seed 0")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 and a usage line on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (TokdError, OSError, ValueError) as exc:
        print(f"tokd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print(f"tokd {args.command}: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
