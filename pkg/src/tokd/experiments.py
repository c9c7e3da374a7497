"""The desk-scale ablation grid: block variant x training data/role scheme x seeds."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import layer_similarities, pca_dump
from .blocks import BlockVariant
from .datapipe import GenConfig, assemble_batch, eval_example, generate_dataset
from .evaluation import evaluate
from .model import ModelConfig, forward_batch
from .trainer import TrainHParams, train

log = logging.getLogger(__name__)

VARIANTS = (BlockVariant.PLAIN, BlockVariant.TOKD, BlockVariant.TOKD_PLUS)
# column -> (synthetic share of the training scenes, role-assignment scheme)
COLUMNS = {
    "real_only": (0.0, "naive"),
    "naive_synthetic": (0.5, "naive"),
    "clean_target_synthetic": (0.5, "clean_target"),
}
ABLATION_MODEL = ModelConfig(d_model=64, n_layers=4, n_heads=4, patch=8, image_size=(32, 32))
ABLATION_HPARAMS = TrainHParams(lr_peak=1e-3, total_steps=2000, warmup_steps=100, batch_size=4, log_every=0)
CSV_HEADER = ("variant", "data", "median_psnr", "median_ssim", "mean_cos_last2", "seed_psnrs")


@dataclass
class AblationSpec:
    steps: int = 2000
    seeds: int = 3
    n_scenes: int = 64
    n_test: int = 32
    data_seed: int = 7
    severity: float = 0.5
    model: ModelConfig = ABLATION_MODEL
    hparams: TrainHParams = ABLATION_HPARAMS
    variants: tuple = VARIANTS
    columns: tuple = tuple(COLUMNS)


@dataclass
class CellResult:
    variant: BlockVariant
    column: str
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    cos_last2: list = field(default_factory=list)  # per seed, mean over held-out scenes and final two layers
    seconds: float = 0.0

    @property
    def median_psnr(self) -> float:
        return float(np.median(self.psnr))

    @property
    def median_ssim(self) -> float:
        return float(np.median(self.ssim))


def late_layer_similarity(params: dict, cfg: ModelConfig, records: list, n_last: int = 2) -> float:
    """Mean source-target cosine similarity over the final ``n_last`` layers and all records."""
    batch = assemble_batch([eval_example(r, cfg.n_sources) for r in records], cfg.np_dtype)
    _, feats = forward_batch(params, cfg, batch["src_images"], batch["src_rays"], batch["tgt_rays"], capture=True)
    sims = [layer_similarities(feats, b)[-n_last:] for b in range(len(records))]
    return float(np.mean(sims))


def run_ablation(spec: AblationSpec = AblationSpec(), out_dir=None, pca_dir=None) -> dict:
    """Train and evaluate every (variant, column, seed) cell.

    Every column shares the same held-out scenes and the same real training
    scenes; synthetic columns replace half of the training scenes with
    artifact-injected synthetic ones. Returns ``{(variant, column): CellResult}``
    and, if ``out_dir`` is given, writes ``ablation.csv`` there.
    """
    gen = GenConfig(size=spec.model.image_size[0], severity=spec.severity)
    hp = spec.hparams.replace(total_steps=spec.steps, warmup_steps=min(spec.hparams.warmup_steps, spec.steps))
    datasets = {}
    test = None
    for column in spec.columns:
        frac, _ = COLUMNS[column]
        data = generate_dataset(spec.n_scenes, spec.data_seed, gen, synthetic_frac=frac, n_test=spec.n_test)
        datasets[column] = [r for r in data if r.split == "train"]
        test = [r for r in data if r.split == "test"]

    results = {}
    for column in spec.columns:
        scheme = COLUMNS[column][1]
        for variant in spec.variants:
            cfg = spec.model.replace(variant=variant)
            cell = CellResult(variant, column)
            t0 = time.perf_counter()
            for seed in range(spec.seeds):
                res = train(datasets[column], cfg, hp.replace(scheme=scheme), seed=seed)
                ema = res.checkpoint.ema
                report = evaluate(ema, cfg, test)
                cell.psnr.append(report.mean_psnr)
                cell.ssim.append(report.mean_ssim)
                cell.cos_last2.append(late_layer_similarity(ema, cfg, test))
                if pca_dir is not None and seed == 0 and column == "real_only":
                    batch = assemble_batch([eval_example(test[0], cfg.n_sources)], cfg.np_dtype)
                    _, feats = forward_batch(ema, cfg, batch["src_images"], batch["src_rays"], batch["tgt_rays"],
                                             capture=True)
                    pca_dump(feats, cfg, Path(pca_dir) / variant.value)
                log.info("%s %s seed %d: psnr %.3f cos %.4f", variant.value, column, seed, cell.psnr[-1],
                         cell.cos_last2[-1])
            cell.seconds = time.perf_counter() - t0
            results[(variant, column)] = cell
    if out_dir is not None:
        write_ablation_csv(results, Path(out_dir) / "ablation.csv")
    return results


def write_ablation_csv(results: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for (variant, column), cell in results.items():
            w.writerow([variant.value, column, f"{cell.median_psnr:.4f}", f"{cell.median_ssim:.4f}",
                        f"{np.mean(cell.cos_last2):.4f}", ";".join(f"{p:.4f}" for p in cell.psnr)])
    return path
