"""Patchify/unpatchify and the linear source/target embedders and detokenizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError

SOURCE = 0
TARGET = 1
NO_VIEW = -1


@dataclass
class PatchGrid:
    patches: np.ndarray  # (H/p * W/p, p*p*c), row-major patch order
    p: int
    height: int
    width: int

    @property
    def channels(self) -> int:
        return self.patches.shape[-1] // (self.p * self.p)


@dataclass
class TokenBatch:
    tokens: object  # Tensor or ndarray, [..., n, d]
    delta: np.ndarray  # [n] role indicator, 0 source / 1 target
    view_index: np.ndarray  # [n] source view id, NO_VIEW for target tokens

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.int64)
        self.view_index = np.asarray(self.view_index, dtype=np.int64)
        n = self.tokens.shape[-2]
        if self.delta.shape != (n,) or self.view_index.shape != (n,):
            raise DimensionError(f"role metadata length does not match {n} tokens")
        if not np.isin(self.delta, (SOURCE, TARGET)).all():
            raise DimensionError("role indicator must be 0 (source) or 1 (target)")

    @property
    def n_source(self) -> int:
        return int((self.delta == SOURCE).sum())

    @property
    def n_target(self) -> int:
        return int((self.delta == TARGET).sum())

    def replace(self, tokens) -> "TokenBatch":
        return TokenBatch(tokens, self.delta, self.view_index)


def _check_divisible(h: int, w: int, p: int):
    if p <= 0 or h % p or w % p:
        raise DimensionError(f"image extent {h}x{w} is not divisible by patch size {p}")


def patchify_array(x, p: int):
    """[..., H, W, c] -> [..., (H/p)(W/p), p*p*c]. Works on ndarrays and Tensors."""
    *lead, h, w, c = x.shape
    _check_divisible(h, w, p)
    lead = tuple(lead)
    nl = len(lead)
    shape6 = lead + (h // p, p, w // p, p, c)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    out_shape = lead + ((h // p) * (w // p), p * p * c)
    if isinstance(x, ad.Tensor):
        return ad.reshape(ad.transpose(ad.reshape(x, shape6), perm), out_shape)
    return np.ascontiguousarray(np.asarray(x).reshape(shape6).transpose(perm)).reshape(out_shape)


def unpatchify_array(x, p: int, h: int, w: int):
    """Inverse of :func:`patchify_array`."""
    *lead, n, length = x.shape
    _check_divisible(h, w, p)
    if n != (h // p) * (w // p) or length % (p * p):
        raise DimensionError(f"{n} patches of length {length} cannot tile a {h}x{w} image with p={p}")
    c = length // (p * p)
    lead = tuple(lead)
    nl = len(lead)
    shape6 = lead + (h // p, w // p, p, p, c)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    out_shape = lead + (h, w, c)
    if isinstance(x, ad.Tensor):
        return ad.reshape(ad.transpose(ad.reshape(x, shape6), perm), out_shape)
    return np.ascontiguousarray(np.asarray(x).reshape(shape6).transpose(perm)).reshape(out_shape)


def patchify(x: np.ndarray, p: int) -> PatchGrid:
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"expected an H x W x c array, got shape {x.shape}")
    return PatchGrid(patchify_array(x, p), p, x.shape[0], x.shape[1])


def unpatchify(g: PatchGrid) -> np.ndarray:
    return unpatchify_array(g.patches, g.p, g.height, g.width)


def embed_source(img_patch, plk_patch, weights: dict):
    """Source token = Linear([image patch, Plücker patch]); inputs are [..., 3p²] and [..., 6p²]."""
    img_patch, plk_patch = ad.as_tensor(img_patch), ad.as_tensor(plk_patch)
    if img_patch.shape[:-1] != plk_patch.shape[:-1] or img_patch.shape[-1] * 2 != plk_patch.shape[-1]:
        raise DimensionError(f"source patches disagree: image {img_patch.shape}, rays {plk_patch.shape}")
    x = ad.concat([img_patch, plk_patch], axis=-1)
    return ad.linear(x, weights["src_w"], weights["src_b"])


def embed_target(plk_patch, weights: dict):
    return ad.linear(plk_patch, weights["tgt_w"], weights["tgt_b"])


def detokenize(token, weights: dict):
    """Affine map to 3p² values then a sigmoid into [0, 1]."""
    return ad.sigmoid(ad.linear(token, weights["out_w"], weights["out_b"]))


def token_roles(n_views: int, tokens_per_view: int, n_target: int) -> tuple[np.ndarray, np.ndarray]:
    delta = np.concatenate([np.full(n_views * tokens_per_view, SOURCE), np.full(n_target, TARGET)])
    view = np.concatenate([np.repeat(np.arange(n_views), tokens_per_view), np.full(n_target, NO_VIEW)])
    return delta, view


def count_tokens(k: int, height: int, width: int, p: int) -> int:
    _check_divisible(height, width, p)
    return (k + 1) * (height // p) * (width // p)
