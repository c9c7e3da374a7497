"""Feature analysis (per-layer PCA, source/target similarity) and analytic cost counting."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .blocks import BlockVariant
from .errors import ArgumentError
from .model import Features, ModelConfig
from .tokenizer import SOURCE, TARGET


# ---------------------------------------------------------------- PCA

@dataclass
class PCAResult:
    projection: np.ndarray  # [n, k]
    components: np.ndarray  # [k, d], orthonormal rows
    mean: np.ndarray  # [d]
    explained_variance: np.ndarray  # [k], descending


def pca(tokens: np.ndarray, k: int = 3) -> PCAResult:
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ArgumentError(f"PCA needs at least 3 tokens, got array of shape {x.shape}")
    mu = x.mean(axis=0)
    xc = x - mu
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    k_eff = min(k, vt.shape[0])
    comps = vt[:k_eff]
    var = s[:k_eff] ** 2 / max(x.shape[0] - 1, 1)
    if k_eff < k:
        comps = np.vstack([comps, np.zeros((k - k_eff, x.shape[1]))])
        var = np.concatenate([var, np.zeros(k - k_eff)])
    return PCAResult(xc @ comps.T, comps, mu, var)


def minmax(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0, keepdims=True)
    span = x.max(axis=0, keepdims=True) - lo
    return np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.5)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def source_target_similarity(tokens: np.ndarray, delta: np.ndarray) -> float:
    """Cosine similarity between the mean source token and the mean target token."""
    tokens = np.asarray(tokens, dtype=np.float64)
    return cosine(tokens[delta == SOURCE].mean(axis=0), tokens[delta == TARGET].mean(axis=0))


def layer_similarities(features: Features, batch_index: int = 0) -> list:
    return [source_target_similarity(layer[batch_index], features.delta) for layer in features.layers]


def _grid_image(rgb_tokens: np.ndarray, gh: int, gw: int, upscale: int) -> np.ndarray:
    img = rgb_tokens.reshape(gh, gw, 3)
    return np.repeat(np.repeat(img, upscale, axis=0), upscale, axis=1)


def _save_png(img: np.ndarray, path: Path):
    Image.fromarray(np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def pca_dump(features: Features, cfg: ModelConfig, out_dir, batch_index: int = 0, upscale: int | None = None) -> dict:
    """Write ``layer_<l>_src.png`` / ``layer_<l>_tgt.png`` for every captured layer.

    The 3-component basis is fit per layer on source and target tokens jointly
    and each channel is min-max scaled to [0, 1]. Returns per-layer similarity
    and explained-variance statistics (also written to ``similarity.csv``).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = cfg.image_size
    gh, gw = h // cfg.patch, w // cfg.patch
    up = cfg.patch if upscale is None else upscale
    delta = features.delta
    n_views = int(features.view_index.max()) + 1
    stats = {"similarity": [], "explained_variance": []}
    for layer, tokens in enumerate(features.layers):
        toks = tokens[batch_index]
        res = pca(toks, 3)
        rgb = minmax(res.projection)
        src = rgb[delta == SOURCE].reshape(n_views, gh * gw, 3)
        src_img = np.concatenate([_grid_image(v, gh, gw, up) for v in src], axis=1)
        tgt_img = _grid_image(rgb[delta == TARGET], gh, gw, up)
        _save_png(src_img, out / f"layer_{layer}_src.png")
        _save_png(tgt_img, out / f"layer_{layer}_tgt.png")
        stats["similarity"].append(source_target_similarity(toks, delta))
        stats["explained_variance"].append(res.explained_variance.tolist())
    lines = ["layer,cosine_src_tgt,ev1,ev2,ev3"]
    for layer, (sim, ev) in enumerate(zip(stats["similarity"], stats["explained_variance"])):
        lines.append(f"{layer},{sim!r},{ev[0]!r},{ev[1]!r},{ev[2]!r}")
    (out / "similarity.csv").write_text("\n".join(lines) + "\n")
    return stats


# ---------------------------------------------------------------- cost model

def count_params_flops(cfg: ModelConfig) -> dict:
    """Closed-form parameter count and forward FLOPs for one target view.

    FLOPs count matmuls as 2mnk (bias adds excluded) and one FLOP per element
    for residual adds, attention temperature scaling and modulation
    arithmetic; normalization, softmax and activations are not counted.
    """
    d, p, L, h = cfg.d_model, cfg.patch, cfg.n_layers, cfg.n_heads
    ds = cfg.style_width
    hidden = cfg.ffn_mult * d
    H, W = cfg.image_size
    k = cfg.n_sources
    n_tgt = (H // p) * (W // p)
    n_src = k * n_tgt
    n = n_src + n_tgt
    v = cfg.variant

    embed_params = (9 * p * p * d + d) + (6 * p * p * d + d)
    block_params = (d * 3 * d + 3 * d) + (d * d + d) + h + 2 * d + (d * hidden + hidden) + (hidden * d + d)
    mod_params = v.pre_sites * (ds * 2 * d + 2 * d) + v.post_sites * (ds * d + d)
    style_params = (2 * ds + ds * ds + ds) if v is not BlockVariant.PLAIN else 0
    detok_params = d * 3 * p * p + 3 * p * p
    params = embed_params + style_params + L * (block_params + mod_params) + detok_params

    embed_flops = 2 * n_src * 9 * p * p * d + 2 * n_tgt * 6 * p * p * d
    attn = 2 * n * d * 3 * d + 2 * n * n * d + 2 * n * n * d + 2 * n * d * d + h * n * n
    ffn = 2 * n * d * hidden + 2 * n * hidden * d
    residual = 2 * n * d
    mod = v.pre_sites * (2 * 2 * ds * 2 * d + 3 * n * d) + v.post_sites * (2 * 2 * ds * d + 2 * n * d)
    style = 2 * 2 * ds * ds if v is not BlockVariant.PLAIN else 0
    detok = 2 * n_tgt * d * 3 * p * p
    flops = embed_flops + style + L * (attn + ffn + residual + mod) + detok
    return {"params": int(params), "flops": int(flops), "tokens": int(n),
            "modulation_params": int(style_params + L * mod_params)}


def overhead_ratio(cfg: ModelConfig) -> dict:
    """TokDPlus / Plain cost ratios at otherwise identical settings."""
    plain = count_params_flops(cfg.replace(variant=BlockVariant.PLAIN))
    plus = count_params_flops(cfg.replace(variant=BlockVariant.TOKD_PLUS))
    return {"plain": plain, "tokd_plus": plus, "flop_ratio": plus["flops"] / plain["flops"],
            "param_ratio": plus["params"] / plain["params"]}
