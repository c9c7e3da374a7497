"""The full novel-view-synthesis network: tokenize, run L blocks, detokenize target tokens."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .blocks import BlockVariant, apply_block, init_block_params, init_style_params, style_vectors
from .errors import ArgumentError, ConfigError, DimensionError
from .tokenizer import (TokenBatch, detokenize, embed_source, embed_target, patchify_array,
                        token_roles, unpatchify_array)

PAPER_LAMBDA_PERCEPTUAL = 0.5


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 6
    n_heads: int = 4
    patch: int = 8
    variant: BlockVariant = BlockVariant.TOKD_PLUS
    lambda_perceptual: float = PAPER_LAMBDA_PERCEPTUAL
    image_size: tuple = (64, 64)
    n_sources: int = 2
    d_style: int | None = None
    ffn_mult: int = 4
    perceptual: str = "off"  # "off" or "grad" (gradient-difference proxy)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "variant", BlockVariant.parse(self.variant))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be at least 1")
        h, w = self.image_size
        if self.patch <= 0 or h % self.patch or w % self.patch:
            raise ConfigError(f"image size {h}x{w} is not divisible by patch {self.patch}")
        if self.perceptual not in ("off", "grad"):
            raise ConfigError(f"unknown perceptual loss {self.perceptual!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if self.n_sources < 1:
            raise ConfigError("n_sources must be at least 1")

    @property
    def style_width(self) -> int:
        return self.d_model if self.d_style is None else self.d_style

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def patches_per_view(self) -> int:
        h, w = self.image_size
        return (h // self.patch) * (w // self.patch)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PAPER_CONFIG = ModelConfig(d_model=1024, n_layers=24, n_heads=16, patch=8, image_size=(256, 256))
TINY_CONFIG = ModelConfig(d_model=16, n_layers=2, n_heads=2, patch=8, image_size=(16, 16), dtype="float64")


def is_norm_param(name: str) -> bool:
    return ".ln." in name or name.startswith("ln.")


def init_params(cfg: ModelConfig, rng: ad.Rng) -> dict:
    """Fresh parameters (ordered name -> array) for ``cfg``."""
    dt = cfg.np_dtype
    p, d = cfg.patch, cfg.d_model
    src_in, tgt_in, out = 9 * p * p, 6 * p * p, 3 * p * p
    params = {
        "embed.src_w": (rng.derive(1).normal((src_in, d)) / np.sqrt(src_in)).astype(dt),
        "embed.src_b": np.zeros(d, dtype=dt),
        "embed.tgt_w": (rng.derive(2).normal((tgt_in, d)) / np.sqrt(tgt_in)).astype(dt),
        "embed.tgt_b": np.zeros(d, dtype=dt),
    }
    if cfg.variant is not BlockVariant.PLAIN:
        for k, v in init_style_params(cfg.style_width, rng.derive(3), dt).items():
            params[f"style.{k}"] = v
    for layer in range(cfg.n_layers):
        bp = init_block_params(d, cfg.n_heads, cfg.variant, rng.derive(100 + layer), d_style=cfg.style_width,
                               ffn_mult=cfg.ffn_mult, n_layers=cfg.n_layers, dtype=dt)
        for k, v in bp.items():
            params[f"blocks.{layer}.{k}"] = v
    params["detok.out_w"] = (rng.derive(4).normal((d, out)) * (0.1 / np.sqrt(d))).astype(dt)
    params["detok.out_b"] = np.zeros(out, dtype=dt)
    return params


def convert_variant(params: dict, cfg: ModelConfig, variant) -> tuple[dict, ModelConfig]:
    """Reuse shared weights under another block variant; modulation heads start at zero."""
    variant = BlockVariant.parse(variant)
    new_cfg = cfg.replace(variant=variant)
    fresh = init_params(new_cfg, ad.Rng(0))
    out = {}
    for name, arr in fresh.items():
        out[name] = np.array(params[name], copy=True) if name in params else arr
    return out, new_cfg


def _group(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class Features:
    embedded: np.ndarray  # layer-0 input tokens [B, n, d]
    layers: list = field(default_factory=list)  # L block outputs, each [B, n, d]
    delta: np.ndarray | None = None
    view_index: np.ndarray | None = None


def forward_batch(params: dict, cfg: ModelConfig, src_images, src_rays, tgt_rays, capture: bool = False):
    """Batched prediction.

    ``src_images`` [B, k, H, W, 3], ``src_rays`` [B, k, H, W, 6], ``tgt_rays``
    [B, H, W, 6]. ``params`` values may be arrays or Tensors. Returns the
    predicted target image Tensor [B, H, W, 3] (and ``Features`` when
    ``capture`` is set).
    """
    dt = cfg.np_dtype
    src_images = np.asarray(src_images, dtype=dt)
    src_rays = np.asarray(src_rays, dtype=dt)
    tgt_rays = np.asarray(tgt_rays, dtype=dt)
    if src_images.ndim != 5 or src_rays.ndim != 5 or tgt_rays.ndim != 4:
        raise DimensionError("expected [B,k,H,W,3] images, [B,k,H,W,6] and [B,H,W,6] ray maps")
    B, k, H, W, _ = src_images.shape
    if k < 1:
        raise ArgumentError("at least one source view is required")
    if src_rays.shape != (B, k, H, W, 6) or tgt_rays.shape != (B, H, W, 6) or src_images.shape[-1] != 3:
        raise DimensionError(f"view size mismatch: images {src_images.shape}, rays {src_rays.shape}, "
                             f"target rays {tgt_rays.shape}")
    if (H, W) != cfg.image_size:
        raise DimensionError(f"views are {H}x{W} but the model is configured for {cfg.image_size}")
    p = cfg.patch
    npv = (H // p) * (W // p)

    img_tok = patchify_array(src_images, p).reshape(B, k * npv, 3 * p * p)
    plk_tok = patchify_array(src_rays, p).reshape(B, k * npv, 6 * p * p)
    tgt_tok = patchify_array(tgt_rays, p)

    embed = _group(params, "embed.")
    tokens = ad.concat([embed_source(img_tok, plk_tok, embed), embed_target(tgt_tok, embed)], axis=1)
    delta, view = token_roles(k, npv, npv)
    batch = TokenBatch(tokens, delta, view)
    feats = Features(np.array(tokens.data), delta=delta, view_index=view) if capture else None

    style_rows = None
    if cfg.variant is not BlockVariant.PLAIN:
        style_rows = style_vectors(_group(params, "style."))
    for layer in range(cfg.n_layers):
        batch = apply_block(cfg.variant, batch, style_rows, _group(params, f"blocks.{layer}."), cfg.n_heads)
        if capture:
            feats.layers.append(np.array(batch.tokens.data))

    # source tokens are discarded after the last block
    out_tok = ad.slice_axis(batch.tokens, k * npv, (k + 1) * npv, axis=1)
    patches = detokenize(out_tok, _group(params, "detok."))
    pred = unpatchify_array(patches, p, H, W)
    if capture:
        return pred, feats
    return pred


def _canonical_order(sources) -> list:
    # metadata-free ordering makes the prediction independent of how the caller lists views
    def key(item):
        img, rays = item
        return np.asarray(rays, dtype=np.float64).tobytes() + np.asarray(img, dtype=np.float64).tobytes()
    return sorted(sources, key=key)


def _stack_sources(sources, target_rays):
    if not sources:
        raise ArgumentError("at least one source view is required")
    shapes = {np.shape(img)[:2] for img, _ in sources} | {np.shape(r)[:2] for _, r in sources}
    shapes.add(np.shape(target_rays)[:2])
    if len(shapes) != 1:
        raise DimensionError(f"all views must share one image size, got {sorted(shapes)}")
    sources = _canonical_order(sources)
    imgs = np.stack([np.asarray(i) for i, _ in sources])[None]
    rays = np.stack([np.asarray(r) for _, r in sources])[None]
    return imgs, rays, np.asarray(target_rays)[None]


def forward(sources, target_rays, cfg: ModelConfig, params: dict) -> np.ndarray:
    """Predict one target image (H, W, 3) in [0, 1] from a list of (image, Plücker map)."""
    imgs, rays, tgt = _stack_sources(sources, target_rays)
    return forward_batch(params, cfg, imgs, rays, tgt).data[0]


def forward_with_features(sources, target_rays, cfg: ModelConfig, params: dict):
    """Like :func:`forward` but also returns every block's output tokens."""
    imgs, rays, tgt = _stack_sources(sources, target_rays)
    pred, feats = forward_batch(params, cfg, imgs, rays, tgt, capture=True)
    return pred.data[0], feats


# ---------------------------------------------------------------- loss

def gradient_difference(pred, gt):
    """Mean absolute difference of horizontal and vertical finite-difference gradients."""
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt, dtype=pred.dtype)
    h_ax, w_ax = pred.ndim - 3, pred.ndim - 2
    terms = []
    for ax in (h_ax, w_ax):
        n = pred.shape[ax]
        dp = ad.sub(ad.slice_axis(pred, 1, n, axis=ax), ad.slice_axis(pred, 0, n - 1, axis=ax))
        dg = np.diff(gt, axis=ax)
        terms.append(ad.mean(ad.absolute(ad.sub(dp, dg))))
    return ad.add(terms[0], terms[1])


PERCEPTUAL_HOOKS: dict = {"grad": gradient_difference}


def loss(pred, gt, cfg: ModelConfig, perceptual: Callable | None = None):
    """``MSE + lambda * perceptual``; the perceptual term is off unless configured or supplied."""
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    total = ad.mse(pred, gt)
    hook = perceptual if perceptual is not None else PERCEPTUAL_HOOKS.get(cfg.perceptual)
    if hook is not None and cfg.lambda_perceptual != 0:
        total = ad.add(total, ad.mul(hook(pred, gt), cfg.lambda_perceptual))
    return total


def param_count(params: dict) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))
