"""Held-out evaluation: per-scene PSNR/SSIM and the aggregate report."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datapipe import assemble_batch, eval_example
from .errors import DataError
from .metrics import psnr, ssim
from .model import ModelConfig, forward_batch


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class MetricReport:
    scene_ids: list
    psnr: list
    ssim: list
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.scene_ids)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def rows(self) -> list:
        out = [[s, repr(float(p)), repr(float(q))] for s, p, q in zip(self.scene_ids, self.psnr, self.ssim)]
        out.append(["mean", repr(self.mean_psnr), repr(self.mean_ssim)])
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene_id", "psnr", "ssim"])
            w.writerows(self.rows())
            w.writerow(["# count", self.count, ""])
            w.writerow(["# config_hash", self.config_hash, ""])
        return path


def evaluate(params: dict, cfg: ModelConfig, records: list, batch_size: int = 16) -> MetricReport:
    """Predict the fixed held-out view of every record and score it."""
    if not records:
        raise DataError("evaluation needs at least one scene")
    ids, ps, ss = [], [], []
    for start in range(0, len(records), batch_size):
        chunk = [eval_example(r, cfg.n_sources) for r in records[start:start + batch_size]]
        batch = assemble_batch(chunk, cfg.np_dtype)
        pred = forward_batch(params, cfg, batch["src_images"], batch["src_rays"], batch["tgt_rays"]).data
        for sid, p, g in zip(batch["scene_ids"], pred, batch["tgt_images"]):
            ids.append(sid)
            ps.append(psnr(p, g))
            ss.append(ssim(p, g))
    return MetricReport(ids, ps, ss, config_hash(cfg))
