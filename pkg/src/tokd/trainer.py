"""AdamW with a linear warmup/decay schedule, EMA shadow weights, and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .datapipe import assemble_batch, assign_roles
from .errors import ArgumentError, DataError, NumericError
from .metrics import psnr
from .model import ModelConfig, forward_batch, init_params, is_norm_param, loss

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "lr", "loss", "psnr_raw", "psnr_ema")


@dataclass(frozen=True)
class TrainHParams:
    lr_peak: float = 1e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-8
    warmup_steps: int = 100
    total_steps: int = 2000
    ema_decay: float = 0.99
    batch_size: int = 4
    grad_clip: float | None = None
    log_every: int = 100
    scheme: str = "clean_target"

    def replace(self, **kw) -> "TrainHParams":
        return replace(self, **kw)


# recipe of the reference large-scale run; kept for documentation and schedule tests
PAPER_HPARAMS = TrainHParams(lr_peak=2e-4, betas=(0.9, 0.95), weight_decay=0.05, warmup_steps=2500,
                             total_steps=100_000, ema_decay=0.99, batch_size=64)
DESK_HPARAMS = TrainHParams()


def lr_at(step: int, hp: TrainHParams) -> float:
    """Linear 0 -> lr_peak over the warmup, then linear lr_peak -> 0 at total_steps."""
    if step < 0 or step > hp.total_steps:
        raise ArgumentError(f"step {step} outside [0, {hp.total_steps}]")
    if step < hp.warmup_steps:
        return hp.lr_peak * step / hp.warmup_steps
    decay_len = hp.total_steps - hp.warmup_steps
    if decay_len <= 0:
        return hp.lr_peak
    return hp.lr_peak * (hp.total_steps - step) / decay_len


@dataclass
class OptimState:
    hp: TrainHParams
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, params: dict, hp: TrainHParams) -> "OptimState":
        return cls(hp, {k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float | None = None) -> tuple[dict, OptimState]:
    """One decoupled-weight-decay Adam update, in place.

    ``lr`` defaults to the schedule value for the update being taken. Weight
    decay skips normalization parameters.
    """
    hp = state.hp
    t = state.step + 1
    if lr is None:
        lr = lr_at(min(t, hp.total_steps), hp)
    b1, b2 = hp.betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if hp.weight_decay and not is_norm_param(name):
            p *= 1.0 - lr * hp.weight_decay
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + hp.eps)).astype(p.dtype, copy=False)
    state.step = t
    return params, state


def ema_update(shadow: dict, params: dict, decay: float) -> dict:
    """``shadow <- decay * shadow + (1 - decay) * params`` (in place)."""
    if not 0.0 <= decay < 1.0:
        raise ArgumentError(f"EMA decay must lie in [0, 1), got {decay}")
    for name, p in params.items():
        s = shadow[name]
        s *= decay
        s += (1.0 - decay) * p
    return shadow


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def loss_and_grads(params: dict, cfg: ModelConfig, batch: dict):
    leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
    pred = forward_batch(leaves, cfg, batch["src_images"], batch["src_rays"], batch["tgt_rays"])
    value = loss(pred, batch["tgt_images"], cfg)
    value.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(value.data), pred.data, grads


def predict(params: dict, cfg: ModelConfig, batch: dict) -> np.ndarray:
    return forward_batch(params, cfg, batch["src_images"], batch["src_rays"], batch["tgt_rays"]).data


def sample_batch(records: list, cfg: ModelConfig, hp: TrainHParams, seed: int, step: int) -> dict:
    """The batch for ``step``; depends only on (seed, step), never on earlier draws."""
    rng = ad.Rng(seed, 0xBA7C).derive(step)
    picks = rng.integers(0, len(records), hp.batch_size)
    examples = [assign_roles(records[int(i)], cfg.n_sources, rng.derive(j), hp.scheme) for j, i in enumerate(picks)]
    return assemble_batch(examples, cfg.np_dtype)


class TrainingDiverged(NumericError):
    def __init__(self, message: str, last_good: ckpt_io.Checkpoint):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainResult:
    checkpoint: ckpt_io.Checkpoint
    metrics: list


def _snapshot(params, ema, state, cfg, seed, step) -> ckpt_io.Checkpoint:
    copy = lambda d: {k: np.array(v, copy=True) for k, v in d.items()}  # noqa: E731
    return ckpt_io.Checkpoint(copy(params), copy(ema), cfg, step=step, seed=seed,
                              rng_state={"seed": seed, "stream": 0xBA7C, "next_step": step},
                              opt_m=copy(state.m), opt_v=copy(state.v))


def train(dataset: list, cfg: ModelConfig, hp: TrainHParams, seed: int, *, resume: ckpt_io.Checkpoint | None = None,
          stop_at: int | None = None, metrics_path=None, checkpoint_path=None, checkpoint_every: int = 0,
          params: dict | None = None) -> TrainResult:
    """Run (or continue) training and return the final checkpoint plus the metrics log.

    Batches are drawn from counter-based streams keyed by (seed, step), so a
    run resumed from a checkpoint reproduces the uninterrupted trajectory
    exactly. ``stop_at`` ends early without changing the schedule.
    """
    records = [r for r in dataset if r.split == "train"] or list(dataset)
    if not records:
        raise DataError("training needs at least one scene")
    if resume is not None:
        cfg, seed = resume.config, resume.seed
        params = {k: np.array(v, copy=True) for k, v in resume.params.items()}
        ema = {k: np.array(v, copy=True) for k, v in resume.ema.items()}
        state = OptimState(hp, {k: np.array(v, copy=True) for k, v in resume.opt_m.items()},
                           {k: np.array(v, copy=True) for k, v in resume.opt_v.items()}, resume.step)
        if not state.m:
            state = OptimState.create(params, hp)
            state.step = resume.step
    else:
        if params is None:
            params = init_params(cfg, ad.Rng(seed, 0x1A17))
        else:
            params = {k: np.array(v, copy=True) for k, v in params.items()}
        ema = {k: np.array(v, copy=True) for k, v in params.items()}
        state = OptimState.create(params, hp)

    end = hp.total_steps if stop_at is None else min(stop_at, hp.total_steps)
    metrics = []
    writer = None
    fh = None
    if metrics_path is not None:
        mp = Path(metrics_path)
        new = not mp.exists() or mp.stat().st_size == 0
        fh = open(mp, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRICS_HEADER)
    last_good = _snapshot(params, ema, state, cfg, seed, state.step)
    try:
        while state.step < end:
            step = state.step
            batch = sample_batch(records, cfg, hp, seed, step)
            value, pred, grads = loss_and_grads(params, cfg, batch)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {step}", last_good)
            if hp.grad_clip:
                clip_grad_norm(grads, hp.grad_clip)
            adamw_step(params, grads, state)
            ema_update(ema, params, hp.ema_decay)
            if hp.log_every and (state.step % hp.log_every == 0 or state.step == end):
                row = {
                    "step": state.step,
                    "lr": lr_at(min(state.step, hp.total_steps), hp),
                    "loss": value,
                    "psnr_raw": float(np.mean([psnr(p, g) for p, g in zip(pred, batch["tgt_images"])])),
                    "psnr_ema": float(np.mean([psnr(p, g) for p, g in
                                               zip(predict(ema, cfg, batch), batch["tgt_images"])])),
                }
                metrics.append(row)
                log.info("step %d lr %.2e loss %.5f psnr raw %.2f ema %.2f", row["step"], row["lr"], row["loss"],
                         row["psnr_raw"], row["psnr_ema"])
                if writer is not None:
                    writer.writerow([row[k] for k in METRICS_HEADER])
                    fh.flush()
            if checkpoint_every and checkpoint_path and state.step % checkpoint_every == 0:
                last_good = _snapshot(params, ema, state, cfg, seed, state.step)
                ckpt_io.save(last_good, checkpoint_path)
    finally:
        if fh is not None:
            fh.close()
    final = _snapshot(params, ema, state, cfg, seed, state.step)
    if checkpoint_path:
        ckpt_io.save(final, checkpoint_path)
    return TrainResult(final, metrics)
