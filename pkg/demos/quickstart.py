"""Render a small dataset, train the tiny model for a few hundred steps and score it.

Run from the repository root::

    python3 demos/quickstart.py [out_dir]

Takes about half a minute on one core. Prints the held-out PSNR/SSIM of the
raw and EMA weights and writes a per-layer PCA dump for one held-out scene.
"""
import sys
from pathlib import Path

from tokd import checkpoint as ckpt_io
from tokd.analysis import pca_dump
from tokd.datapipe import GenConfig, assemble_batch, eval_example, generate_dataset
from tokd.evaluation import evaluate
from tokd.model import TINY_CONFIG, forward_batch
from tokd.trainer import TrainHParams, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
records = generate_dataset(16, seed=0, cfg=GenConfig(size=16), synthetic_frac=0.25, n_test=4)
train_set = [r for r in records if r.split == "train"]
test_set = [r for r in records if r.split == "test"]
print(f"{len(train_set)} training scenes ({sum(r.synthetic for r in train_set)} synthetic), {len(test_set)} held out")

cfg = TINY_CONFIG
hp = TrainHParams(lr_peak=2e-3, total_steps=300, warmup_steps=20, log_every=100)
result = train(train_set, cfg, hp, seed=0, checkpoint_path=out / "tiny.bin")
for row in result.metrics:
    print(f"step {row['step']:4d}  loss {row['loss']:.4f}  psnr raw {row['psnr_raw']:.2f}  ema {row['psnr_ema']:.2f}")

ck = ckpt_io.load(out / "tiny.bin")
for name, params in (("raw", ck.params), ("ema", ck.ema)):
    rep = evaluate(params, cfg, test_set)
    print(f"held-out {name}: psnr {rep.mean_psnr:.2f} dB, ssim {rep.mean_ssim:.3f}")

# the model sees both source views and the target rays; look at how the token features separate
batch = assemble_batch([eval_example(test_set[0], cfg.n_sources)])
_, feats = forward_batch(ck.ema, cfg, batch["src_images"], batch["src_rays"], batch["tgt_rays"], capture=True)
stats = pca_dump(feats, cfg, out / "pca", upscale=16)
print("source/target cosine per layer:", [round(s, 3) for s in stats["similarity"]])
print(f"PCA images in {out / 'pca'}")
