import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokd import autodiff as ad
from tokd.errors import DimensionError
from tokd.tokenizer import (NO_VIEW, SOURCE, TARGET, count_tokens, detokenize, embed_source, embed_target, patchify,
                            patchify_array, token_roles, unpatchify, unpatchify_array)


def test_paper_patch_count():
    g = patchify(np.zeros((256, 256, 3)), 8)
    assert g.patches.shape == (1024, 192)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_patchify_roundtrip_bitwise(gh, gw, p, c, seed):
    x = np.random.default_rng(seed).normal(size=(gh * p, gw * p, c)).astype(np.float32)
    assert unpatchify(patchify(x, p)).tobytes() == x.tobytes()


def test_single_white_pixel_lands_in_patch_zero():
    x = np.zeros((16, 16, 3))
    x[0, 0] = 1.0
    g = patchify(x, 8)
    nonzero = np.flatnonzero(np.abs(g.patches).sum(axis=1))
    assert nonzero.tolist() == [0]


def test_patch_order_is_row_major():
    x = np.zeros((16, 16, 1))
    x[8, 0] = 1.0  # second patch row, first column -> index 2
    x[0, 8] = 2.0  # first row, second column -> index 1
    g = patchify(x, 8)
    assert g.patches[1].max() == 2.0 and g.patches[2].max() == 1.0


def test_indivisible_extent():
    with pytest.raises(DimensionError):
        patchify(np.zeros((10, 16, 3)), 8)


def test_batched_tensor_patchify_matches_numpy():
    x = np.random.default_rng(0).normal(size=(2, 3, 16, 16, 6))
    a = patchify_array(x, 8)
    b = patchify_array(ad.Tensor(x), 8).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(unpatchify_array(ad.Tensor(a), 8, 16, 16).data, x)


def test_zero_inputs_give_zero_token():
    p, d = 2, 4
    w = {"src_w": np.ones((9 * p * p, d)), "src_b": np.zeros(d)}
    tok = embed_source(np.zeros(3 * p * p), np.zeros(6 * p * p), w)
    np.testing.assert_array_equal(tok.data, 0.0)


def test_embed_source_hand_product():
    # p = 1: input is [r, g, b, d0, d1, d2, m0, m1, m2]
    w = np.zeros((9, 4))
    w[0, 0] = 1.0  # token[0] = r
    w[3:6, 1] = 1.0  # token[1] = sum of direction
    w[6, 2] = -2.0  # token[2] = -2 m0
    w[:, 3] = 1.0  # token[3] = sum of everything
    b = np.array([0.0, 0.0, 0.0, 0.5])
    img = np.array([0.2, 0.4, 0.6])
    plk = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    tok = embed_source(img, plk, {"src_w": w, "src_b": b}).data
    np.testing.assert_allclose(tok, [0.2, 6.0, -8.0, 0.2 + 0.4 + 0.6 + 21.0 + 0.5])


def test_source_and_target_embedders_differ():
    rng = np.random.default_rng(0)
    p, d = 2, 4
    w = {"src_w": rng.normal(size=(9 * p * p, d)), "src_b": np.zeros(d),
         "tgt_w": rng.normal(size=(6 * p * p, d)), "tgt_b": np.zeros(d)}
    plk = rng.normal(size=6 * p * p)
    a = embed_source(np.zeros(3 * p * p), plk, w).data
    b = embed_target(plk, w).data
    assert not np.allclose(a, b)


def test_embed_source_shape_mismatch():
    with pytest.raises(DimensionError):
        embed_source(np.zeros(12), np.zeros(20), {"src_w": np.zeros((32, 4)), "src_b": np.zeros(4)})


def test_detokenize_zero_is_half():
    out = detokenize(np.zeros(4), {"out_w": np.zeros((4, 12)), "out_b": np.zeros(12)}).data
    np.testing.assert_array_equal(out, 0.5)


def test_detokenize_saturates():
    out = detokenize(np.ones(4), {"out_w": np.full((4, 12), 10.0), "out_b": np.zeros(12)}).data
    assert out.min() > 0.99


def test_detokenize_gradient():
    rng = np.random.default_rng(3)
    params = {"x": rng.uniform(-1, 1, (3, 4)), "out_w": rng.uniform(-1, 1, (4, 12)), "out_b": rng.uniform(-1, 1, 12)}
    f = lambda p: ad.sum(ad.mul(detokenize(p["x"], p), np.linspace(0, 1, 12)))  # noqa: E731
    assert ad.grad_check(f, params) < 1e-6


def test_token_count_hand_arithmetic():
    assert count_tokens(2, 64, 64, 8) == 192


def test_token_roles():
    delta, view = token_roles(2, 3, 3)
    assert delta.tolist() == [SOURCE] * 6 + [TARGET] * 3
    assert view.tolist() == [0, 0, 0, 1, 1, 1] + [NO_VIEW] * 3
