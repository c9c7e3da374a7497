"""Transformer block variants: plain, input-modulated (TokD) and fully modulated (TokDPlus).

Modulation parameters come from one style vector per role (source/target)
mapped by per-layer, per-site affine heads. Heads start at zero, and the
``(1 + sigma)`` parameterization then makes every modulated block start out
bitwise identical to the plain block.
"""
from __future__ import annotations

import enum

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .tokenizer import TokenBatch

LN_EPS = 1e-6


class BlockVariant(str, enum.Enum):
    PLAIN = "plain"
    TOKD = "tokd"
    TOKD_PLUS = "tokd_plus"

    @classmethod
    def parse(cls, value) -> "BlockVariant":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"plain": cls.PLAIN, "lvsm": cls.PLAIN, "tokd": cls.TOKD,
                   "tokd_plus": cls.TOKD_PLUS, "tokdplus": cls.TOKD_PLUS}
        if key not in aliases:
            raise ConfigError(f"unknown block variant {value!r}")
        return aliases[key]

    @property
    def pre_sites(self) -> int:
        return 0 if self is BlockVariant.PLAIN else 2

    @property
    def post_sites(self) -> int:
        return 2 if self is BlockVariant.TOKD_PLUS else 0


# ---------------------------------------------------------------- parameters

def _normal(rng: ad.Rng, shape, std: float, dtype) -> np.ndarray:
    return (rng.normal(shape) * std).astype(dtype)


def init_style_params(d_style: int, rng: ad.Rng, dtype=np.float32) -> dict:
    """Embedding table (one row per role) followed by a shared linear map."""
    return {
        "embed": _normal(rng.derive(0), (2, d_style), 1.0, dtype),
        "w": _normal(rng.derive(1), (d_style, d_style), 1.0 / np.sqrt(d_style), dtype),
        "b": np.zeros(d_style, dtype=dtype),
    }


def init_block_params(d: int, heads: int, variant: BlockVariant, rng: ad.Rng, *,
                      d_style: int | None = None, ffn_mult: int = 4, n_layers: int = 1,
                      dtype=np.float32) -> dict:
    if heads <= 0 or d % heads:
        raise ConfigError(f"d_model={d} is not divisible by n_heads={heads}")
    variant = BlockVariant.parse(variant)
    d_style = d if d_style is None else d_style
    hidden = ffn_mult * d
    resid_scale = 1.0 / np.sqrt(2.0 * n_layers)
    p = {
        "attn.qkv_w": _normal(rng.derive(0), (d, 3 * d), 1.0 / np.sqrt(d), dtype),
        "attn.qkv_b": np.zeros(3 * d, dtype=dtype),
        "attn.out_w": _normal(rng.derive(1), (d, d), resid_scale / np.sqrt(d), dtype),
        "attn.out_b": np.zeros(d, dtype=dtype),
        "attn.temp": np.full(heads, np.sqrt(d // heads), dtype=dtype),
        "ln.gain": np.ones(d, dtype=dtype),
        "ln.bias": np.zeros(d, dtype=dtype),
        "ffn.w1": _normal(rng.derive(2), (d, hidden), 1.0 / np.sqrt(d), dtype),
        "ffn.b1": np.zeros(hidden, dtype=dtype),
        "ffn.w2": _normal(rng.derive(3), (hidden, d), resid_scale / np.sqrt(hidden), dtype),
        "ffn.b2": np.zeros(d, dtype=dtype),
    }
    for site in range(1, variant.pre_sites + 1):
        p[f"mod{site}.w"] = np.zeros((d_style, 2 * d), dtype=dtype)
        p[f"mod{site}.b"] = np.zeros(2 * d, dtype=dtype)
    for site in range(1, variant.post_sites + 1):
        p[f"post{site}.w"] = np.zeros((d_style, d), dtype=dtype)
        p[f"post{site}.b"] = np.zeros(d, dtype=dtype)
    return p


def attention_params(p: dict) -> dict:
    return {"qkv_w": p["attn.qkv_w"], "qkv_b": p["attn.qkv_b"], "out_w": p["attn.out_w"],
            "out_b": p["attn.out_b"], "temp": p["attn.temp"]}


# ---------------------------------------------------------------- style / modulation

def style_vectors(style: dict):
    """Rows [source, target] of ``Linear(Embed(delta))``, shape [2, d_style]."""
    return ad.linear(style["embed"], style["w"], style["b"])


def modulate(x, sigma, mu):
    """``(1 + sigma) * x + mu`` elementwise; sigma/mu broadcast over leading axes."""
    return ad.add(ad.mul(x, ad.add(sigma, 1.0)), mu)


def site_scale_shift(style_rows, w, b, delta: np.ndarray, d: int):
    """Per-token (sigma, mu), each [n, d], selected by the role indicator."""
    sm = ad.linear(style_rows, w, b)
    sigma = ad.take_rows(ad.slice_axis(sm, 0, d, axis=1), delta)
    mu = ad.take_rows(ad.slice_axis(sm, d, 2 * d, axis=1), delta)
    return sigma, mu


def site_scale(style_rows, w, b, delta: np.ndarray):
    return ad.take_rows(ad.linear(style_rows, w, b), delta)


# ---------------------------------------------------------------- blocks

def _ffn(x, p: dict):
    h = ad.layer_norm(x, p["ln.gain"], p["ln.bias"], LN_EPS)
    h = ad.gelu(ad.linear(h, p["ffn.w1"], p["ffn.b1"]))
    return ad.linear(h, p["ffn.w2"], p["ffn.b2"])


def plain_block(x: TokenBatch, params: dict, heads: int) -> TokenBatch:
    t = ad.as_tensor(x.tokens)
    t = ad.add(t, ad.mhsa_qknorm(t, heads, attention_params(params)))
    t = ad.add(t, _ffn(t, params))
    return x.replace(t)


def _modulated_block(x: TokenBatch, style_rows, params: dict, heads: int, post: bool) -> TokenBatch:
    t = ad.as_tensor(x.tokens)
    d = t.shape[-1]
    delta = x.delta

    s1, m1 = site_scale_shift(style_rows, params["mod1.w"], params["mod1.b"], delta, d)
    branch = ad.mhsa_qknorm(modulate(t, s1, m1), heads, attention_params(params))
    if post:
        branch = ad.mul(branch, ad.add(site_scale(style_rows, params["post1.w"], params["post1.b"], delta), 1.0))
    t = ad.add(t, branch)

    s2, m2 = site_scale_shift(style_rows, params["mod2.w"], params["mod2.b"], delta, d)
    branch = _ffn(modulate(t, s2, m2), params)
    if post:
        branch = ad.mul(branch, ad.add(site_scale(style_rows, params["post2.w"], params["post2.b"], delta), 1.0))
    t = ad.add(t, branch)
    return x.replace(t)


def tokd_block(x: TokenBatch, style_rows, params: dict, heads: int) -> TokenBatch:
    """Pre-modulation (scale and shift) before attention and before the FFN."""
    return _modulated_block(x, style_rows, params, heads, post=False)


def tokd_plus_block(x: TokenBatch, style_rows, params: dict, heads: int) -> TokenBatch:
    """Pre-modulation at both sites plus role-dependent scaling of both residual branches."""
    return _modulated_block(x, style_rows, params, heads, post=True)


def apply_block(variant: BlockVariant, x: TokenBatch, style_rows, params: dict, heads: int) -> TokenBatch:
    if variant is BlockVariant.PLAIN:
        return plain_block(x, params, heads)
    if variant is BlockVariant.TOKD:
        return tokd_block(x, style_rows, params, heads)
    return tokd_plus_block(x, style_rows, params, heads)
