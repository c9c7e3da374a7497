import numpy as np
import pytest

from tokd import autodiff as ad
from tokd.blocks import (BlockVariant, apply_block, init_block_params, init_style_params, modulate, plain_block,
                         style_vectors, tokd_block, tokd_plus_block)
from tokd.errors import ConfigError
from tokd.tokenizer import TokenBatch, token_roles

D, HEADS = 8, 2


def make_batch(rng, n_src=3, n_tgt=2, d=D, dtype=np.float64):
    delta, view = token_roles(1, n_src, n_tgt)
    return TokenBatch(rng.normal(size=(n_src + n_tgt, d)).astype(dtype), delta, view)


def params_for(variant, rng_seed=0, d=D, randomize_heads=False):
    p = init_block_params(d, HEADS, variant, ad.Rng(rng_seed), dtype=np.float64)
    if randomize_heads:
        r = np.random.default_rng(rng_seed + 1)
        for k in p:
            if k.startswith(("mod", "post")):
                p[k] = r.normal(size=p[k].shape) * 0.3
    return p


def style(d=D):
    return style_vectors(init_style_params(d, ad.Rng(7), np.float64))


def test_variant_parse():
    assert BlockVariant.parse("LVSM") is BlockVariant.PLAIN
    assert BlockVariant.parse("tokd-plus") is BlockVariant.TOKD_PLUS
    with pytest.raises(ConfigError):
        BlockVariant.parse("whole")


def test_modulate_identity_and_arithmetic():
    x = np.array([[2.0, -1.0]])
    np.testing.assert_array_equal(modulate(x, np.zeros(2), np.zeros(2)).data, x)
    np.testing.assert_array_equal(modulate(np.array([2.0]), np.array([1.0]), np.array([0.0])).data, [4.0])


def test_modulation_depends_on_role():
    # unit head: sigma = style row, mu = style row
    rows = np.array([[0.5, 0.0], [-0.5, 1.0]])
    delta = np.array([0, 1])
    x = np.ones((2, 2))
    out = modulate(x, rows[delta], rows[delta]).data
    np.testing.assert_allclose(out[0], [1.5 + 0.5, 1.0])
    np.testing.assert_allclose(out[1], [0.5 - 0.5, 2.0 + 1.0])
    assert not np.allclose(out[0], out[1])


def test_zero_branches_are_identity():
    rng = np.random.default_rng(0)
    x = make_batch(rng)
    for variant in BlockVariant:
        p = params_for(variant)
        for k in ("attn.out_w", "attn.out_b", "ffn.w2", "ffn.b2"):
            p[k] = np.zeros_like(p[k])
        if variant is not BlockVariant.PLAIN:
            for k in p:
                if k.startswith(("mod", "post")):
                    p[k] = np.random.default_rng(1).normal(size=p[k].shape)
        out = apply_block(variant, x, style(), p, HEADS).tokens.data
        np.testing.assert_array_equal(out, x.tokens)


def reference_plain_block(x, p, heads):
    """Straight-line reimplementation used as an oracle."""
    n, d = x.shape
    dh = d // heads
    qkv = x @ p["attn.qkv_w"] + p["attn.qkv_b"]
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    ctx = np.zeros_like(x)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh = q[:, sl] / np.linalg.norm(q[:, sl], axis=1, keepdims=True)
        kh = k[:, sl] / np.linalg.norm(k[:, sl], axis=1, keepdims=True)
        logits = p["attn.temp"][h] * qh @ kh.T
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        ctx[:, sl] = w @ v[:, sl]
    x = x + ctx @ p["attn.out_w"] + p["attn.out_b"]
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    h = (x - mu) / np.sqrt(var + 1e-6) * p["ln.gain"] + p["ln.bias"]
    h = h @ p["ffn.w1"] + p["ffn.b1"]
    h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h ** 3)))
    return x + h @ p["ffn.w2"] + p["ffn.b2"]


@pytest.mark.parametrize("n_tokens", [1, 5])
def test_plain_block_matches_reference(n_tokens):
    rng = np.random.default_rng(2)
    d = 4 if n_tokens == 1 else D
    p = params_for(BlockVariant.PLAIN, d=d)
    delta, view = token_roles(1, n_tokens, 0) if n_tokens > 1 else (np.array([1]), np.array([-1]))
    x = TokenBatch(rng.normal(size=(n_tokens, d)), delta, view)
    got = plain_block(x, p, HEADS).tokens.data
    np.testing.assert_allclose(got, reference_plain_block(x.tokens, p, HEADS), rtol=1e-10, atol=1e-12)


def test_plain_block_keeps_metadata():
    x = make_batch(np.random.default_rng(0))
    out = plain_block(x, params_for(BlockVariant.PLAIN), HEADS)
    assert out.delta is x.delta or np.array_equal(out.delta, x.delta)
    np.testing.assert_array_equal(out.view_index, x.view_index)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_neutral_init_is_bitwise_plain(dtype):
    rng = np.random.default_rng(3)
    for trial in range(5):
        x = make_batch(rng, dtype=dtype)
        base = init_block_params(D, HEADS, BlockVariant.TOKD_PLUS, ad.Rng(trial), dtype=dtype)
        plain = {k: v for k, v in base.items() if not k.startswith(("mod", "post"))}
        tokd = {k: v for k, v in base.items() if not k.startswith("post")}
        st = style_vectors(init_style_params(D, ad.Rng(trial + 100), dtype))
        ref = plain_block(x, plain, HEADS).tokens.data.tobytes()
        assert tokd_block(x, st, tokd, HEADS).tokens.data.tobytes() == ref
        assert tokd_plus_block(x, st, base, HEADS).tokens.data.tobytes() == ref


def test_tokd_equals_tokd_plus_with_zero_post_heads():
    rng = np.random.default_rng(4)
    x = make_batch(rng)
    p = params_for(BlockVariant.TOKD_PLUS, randomize_heads=True)
    for k in ("post1.w", "post1.b", "post2.w", "post2.b"):
        p[k] = np.zeros_like(p[k])
    a = tokd_block(x, style(), p, HEADS).tokens.data
    b = tokd_plus_block(x, style(), p, HEADS).tokens.data
    assert a.tobytes() == b.tobytes()


def test_source_shift_leaves_targets_untouched_without_attention():
    rng = np.random.default_rng(5)
    x = make_batch(rng)
    p = params_for(BlockVariant.TOKD_PLUS)
    for k in ("attn.out_w", "attn.out_b"):
        p[k] = np.zeros_like(p[k])
    plain = plain_block(x, p, HEADS).tokens.data
    # one-hot style rows make the head output role-specific: source rows get a large mu
    rows = np.eye(2, D)
    for site in ("mod1", "mod2"):
        p[f"{site}.w"] = np.zeros((D, 2 * D))
        p[f"{site}.w"][0, D:] = np.linspace(-5.0, 5.0, D)  # non-uniform so the FFN layer norm keeps it
    out = tokd_plus_block(x, rows, p, HEADS).tokens.data
    tgt = x.delta == 1
    np.testing.assert_allclose(out[tgt], plain[tgt], atol=1e-6)
    assert np.abs(out[~tgt] - plain[~tgt]).max() > 1e-3


def test_swapping_delta_changes_token_output():
    rng = np.random.default_rng(6)
    x = make_batch(rng)
    p = params_for(BlockVariant.TOKD_PLUS, randomize_heads=True)
    for k in ("attn.out_w", "attn.out_b"):
        p[k] = np.zeros_like(p[k])
    flipped = TokenBatch(x.tokens, 1 - x.delta, x.view_index)
    a = tokd_plus_block(x, style(), p, HEADS).tokens.data
    b = tokd_plus_block(flipped, style(), p, HEADS).tokens.data
    assert np.abs(a[0] - b[0]).max() > 1e-6


def test_block_gradients():
    rng = np.random.default_rng(7)
    x = make_batch(rng, n_src=2, n_tgt=2)
    weights = np.linspace(-1, 1, 4 * D).reshape(4, D)
    for variant in BlockVariant:
        p = params_for(variant, randomize_heads=True)
        if variant is not BlockVariant.PLAIN:
            p.update({f"style.{k}": v for k, v in init_style_params(D, ad.Rng(9), np.float64).items()})

        def f(q, variant=variant):
            st = None
            if variant is not BlockVariant.PLAIN:
                st = style_vectors({"embed": q["style.embed"], "w": q["style.w"], "b": q["style.b"]})
            out = apply_block(variant, x, st, q, HEADS).tokens
            return ad.sum(ad.mul(out, weights))
        report = ad.grad_check_report(f, p)
        assert max(report.values()) < 1e-5, (variant, report)


def test_param_counts_grow_with_sites():
    sizes = {v: sum(a.size for a in init_block_params(16, 2, v, ad.Rng(0)).values()) for v in BlockVariant}
    assert sizes[BlockVariant.PLAIN] < sizes[BlockVariant.TOKD] < sizes[BlockVariant.TOKD_PLUS]
    assert sizes[BlockVariant.TOKD] - sizes[BlockVariant.PLAIN] == 2 * (16 * 32 + 32)
    assert sizes[BlockVariant.TOKD_PLUS] - sizes[BlockVariant.TOKD] == 2 * (16 * 16 + 16)


def test_attention_init_temperature():
    p = init_block_params(16, 4, BlockVariant.PLAIN, ad.Rng(0))
    np.testing.assert_allclose(p["attn.temp"], 2.0)  # sqrt(head_dim)
