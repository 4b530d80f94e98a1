import math

import numpy as np
import pytest
import scipy.signal
from hypothesis import given, settings
from hypothesis import strategies as st

from panp import nn
from panp import tensor as T
from panp.rng import Rng
from panp.tasks import patchify
from panp.tensor import ContractError, ShapeError, Tensor, grad_check


def naive_attention(q, k, v):
    """Per-query loop: weights first, then the weighted sum of value rows."""
    d = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        scores = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in range(k.shape[0])]
        top = max(scores)
        weights = [math.exp(s - top) for s in scores]
        total = sum(weights)
        for j, w in enumerate(weights):
            out[i] += (w / total) * v[j]
    return out


# -- scaled_dot_attention ---------------------------------------------------


def test_single_key_returns_its_value(rng):
    v = rng.normal((1, 4))
    out = nn.scaled_dot_attention(Tensor(rng.normal((3, 4))), Tensor(rng.normal((1, 4))), Tensor(v)).data
    np.testing.assert_allclose(out, np.repeat(v, 3, axis=0), rtol=0, atol=1e-15)


def test_identical_keys_average_values(rng):
    k = np.repeat(rng.normal((1, 4)), 2, axis=0)
    v = rng.normal((2, 4))
    out = nn.scaled_dot_attention(Tensor(rng.normal((2, 4))), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (2, 1)), atol=1e-15)


def test_random_4x8_matches_brute_force(rng):
    q, k, v = rng.normal((4, 8)), rng.normal((6, 8)), rng.normal((6, 8))
    out = nn.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, naive_attention(q, k, v), rtol=0, atol=1e-12)


def test_empty_context_rejected():
    with pytest.raises(ContractError, match="attention requires ≥1 context"):
        nn.scaled_dot_attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))))


def test_mismatched_widths_rejected():
    with pytest.raises(ShapeError):
        nn.scaled_dot_attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 4))))
    with pytest.raises(ShapeError):
        nn.scaled_dot_attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 7), st.integers(1, 6), st.integers(0, 2**31))
def test_outputs_are_convex_combinations(nq, nk, d, seed):
    r = Rng(seed)
    v = r.normal((nk, d))
    out = nn.scaled_dot_attention(Tensor(r.normal((nq, d))), Tensor(r.normal((nk, d))), Tensor(v)).data
    assert np.all(out >= v.min(axis=0) - 1e-12)
    assert np.all(out <= v.max(axis=0) + 1e-12)


@pytest.mark.parametrize("shapes", [((3, 4), (5, 4)), ((1, 6), (2, 6))])
def test_attention_gradient(rng, shapes):
    (nq, d), (nk, _) = shapes
    args = [Tensor(rng.normal((nq, d))), Tensor(rng.normal((nk, d))), Tensor(rng.normal((nk, d)))]
    assert grad_check(lambda q, k, v: T.square(nn.scaled_dot_attention(q, k, v)).sum(), args) < 1e-4


# -- multi-head attention ---------------------------------------------------


def test_single_head_identity_projections_reduce_to_sdpa(rng):
    eye = lambda: nn.param(np.eye(6))  # noqa: E731
    params = nn.AttentionParams(eye(), eye(), eye(), eye(), n_heads=1)
    q, k, v = (Tensor(rng.normal((n, 6))) for n in (2, 4, 4))
    np.testing.assert_allclose(
        nn.multi_head_attention(params, q, k, v).data, nn.scaled_dot_attention(q, k, v).data, rtol=0, atol=1e-15
    )


def test_multi_head_matches_per_head_oracle(rng):
    params = nn.AttentionParams.init(rng, 8, 2, std=0.5)
    q, k, v = rng.normal((3, 8)), rng.normal((5, 8)), rng.normal((5, 8))
    qp, kp, vp = q @ params.w_q.data, k @ params.w_k.data, v @ params.w_v.data
    heads = [naive_attention(qp[:, s], kp[:, s], vp[:, s]) for s in (slice(0, 4), slice(4, 8))]
    expected = np.concatenate(heads, axis=1) @ params.w_o.data
    out = nn.multi_head_attention(params, Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_multi_head_output_shape(rng):
    params = nn.AttentionParams.init(rng, 16, 4)
    out = nn.multi_head_attention(params, Tensor(rng.normal((5, 16))), Tensor(rng.normal((3, 16))), Tensor(rng.normal((3, 16))))
    assert out.shape == (5, 16)


def test_attention_params_validation(rng):
    with pytest.raises(ValueError):
        nn.AttentionParams.init(rng, 10, 4)


def test_multi_head_gradient(rng):
    params = nn.AttentionParams.init(rng, 8, 4, std=0.4)
    q, k, v = (Tensor(rng.normal((n, 8))) for n in (3, 5, 5))
    args = [q, k, v, *params.named_parameters().values()]
    assert grad_check(lambda *_: T.square(nn.multi_head_attention(params, q, k, v)).sum(), args) < 1e-4


# -- encoder block ----------------------------------------------------------


def _zero_outputs(block):
    block.attention.w_o.data[...] = 0.0
    block.mlp_out.weight.data[...] = 0.0
    block.mlp_out.bias.data[...] = 0.0
    return block


def test_block_with_zero_output_projections_is_identity(rng):
    block = _zero_outputs(nn.EncoderBlockParams.init(rng, 8, 2, 16, std=0.5))
    x = rng.normal((5, 8))
    np.testing.assert_allclose(nn.encoder_block(block, Tensor(x)).data, x, rtol=0, atol=1e-15)


def test_block_preserves_shape(rng):
    block = nn.EncoderBlockParams.init(rng, 32, 4, 64)
    assert nn.encoder_block(block, Tensor(rng.normal((9, 32)))).shape == (9, 32)


def test_block_is_permutation_equivariant(rng):
    block = nn.EncoderBlockParams.init(rng, 8, 2, 16, std=0.5)
    x = rng.normal((6, 8))
    perm = rng.permutation(6)
    out = nn.encoder_block(block, Tensor(x)).data
    np.testing.assert_allclose(nn.encoder_block(block, Tensor(x[perm])).data, out[perm], rtol=0, atol=1e-12)


def test_block_hidden_width_validation(rng):
    with pytest.raises(ValueError):
        nn.EncoderBlockParams.init(rng, 16, 4, 8)


def test_block_gradient(rng):
    block = nn.EncoderBlockParams.init(rng, 8, 2, 12, std=0.4)
    x = Tensor(rng.normal((5, 8)))
    args = [x, *block.named_parameters().values()]
    assert grad_check(lambda *_: T.square(nn.encoder_block(block, x)).sum(), args) < 1e-4


# -- patch embedding --------------------------------------------------------


def test_zero_kernel_gives_bias(rng):
    b = rng.normal(6)
    params = nn.PatchEmbedParams(nn.param(np.zeros((4, 6))), nn.param(b), 2)
    out = nn.patch_embed(params, Tensor(rng.uniform(0, 1, (3, 4)))).data
    np.testing.assert_array_equal(out, np.tile(b, (3, 1)))


def test_identical_patches_identical_embeddings(rng):
    params = nn.PatchEmbedParams.init(rng, 2, 6)
    row = rng.uniform(0, 1, (1, 4))
    out = nn.patch_embed(params, Tensor(np.repeat(row, 3, axis=0))).data
    assert np.all(out == out[0])


def test_matches_strided_convolution(rng):
    P, S, d = 4, 16, 5
    params = nn.PatchEmbedParams.init(rng, P, d, std=0.3)
    params.bias.data[...] = rng.normal(d)
    img = rng.uniform(0, 1, (S, S))
    rows, grid = patchify(img, P)
    out = nn.patch_embed(params, Tensor(rows)).data
    for ch in range(d):
        kern = params.kernel.data[:, ch].reshape(P, P)
        # correlate == convolve with the flipped kernel; stride P by subsampling
        conv = scipy.signal.correlate2d(img, kern, mode="valid")[::P, ::P] + params.bias.data[ch]
        expected = np.array([conv[r, c] for r, c in grid])
        np.testing.assert_allclose(out[:, ch], expected, rtol=0, atol=1e-12)


def test_row_wise_independence(rng):
    params = nn.PatchEmbedParams.init(rng, 2, 6)
    a, b = rng.uniform(0, 1, (2, 4)), rng.uniform(0, 1, (3, 4))
    joint = nn.patch_embed(params, Tensor(np.concatenate([a, b]))).data
    split = np.concatenate([nn.patch_embed(params, Tensor(a)).data, nn.patch_embed(params, Tensor(b)).data])
    np.testing.assert_array_equal(joint, split)


def test_wrong_width_rejected(rng):
    with pytest.raises(ShapeError):
        nn.patch_embed(nn.PatchEmbedParams.init(rng, 2, 6), Tensor(np.zeros((3, 5))))


def test_patch_embed_gradient(rng):
    params = nn.PatchEmbedParams.init(rng, 2, 6, std=0.5)
    x = Tensor(rng.uniform(0, 1, (3, 4)))
    args = [x, params.kernel, params.bias]
    assert grad_check(lambda *_: T.square(nn.patch_embed(params, x)).sum(), args) < 1e-4


# -- position embedding -----------------------------------------------------


def test_position_rows_distinct():
    pe = nn.position_embedding(4, 4, 16).data
    for i in range(16):
        for j in range(i + 1, 16):
            assert not np.array_equal(pe[i], pe[j])


def test_position_origin_channel_zero():
    assert nn.position_embedding(4, 4, 16).data[0, 0] == 0.0


def test_position_shape():
    assert nn.position_embedding(4, 4, 32).shape == (16, 32)


def test_position_odd_width_rejected():
    with pytest.raises(ContractError):
        nn.position_embedding(2, 2, 7)


def test_position_halves_encode_row_and_column():
    pe = nn.position_embedding(3, 5, 8).data.reshape(3, 5, 8)
    # row half constant along columns, column half constant along rows
    assert np.all(pe[:, :, :4] == pe[:, :1, :4])
    assert np.all(pe[:, :, 4:] == pe[:1, :, 4:])


def test_position_has_no_parameters():
    pe = nn.position_embedding(2, 2, 4)
    assert not pe.requires_grad
    np.testing.assert_array_equal(pe.data, nn.position_embedding(2, 2, 4).data)


# -- parameter containers ---------------------------------------------------


def test_named_parameters_are_unique_and_complete(rng):
    block = nn.EncoderBlockParams.init(rng, 8, 2, 16)
    named = block.named_parameters("blk")
    assert len(named) == 4 + 4 + 4
    assert len({id(t) for t in named.values()}) == len(named)
    assert all(t.requires_grad for t in named.values())


def test_init_scale(rng):
    dense = nn.Dense.init(rng, 200, 300)
    assert abs(dense.weight.data.std() - nn.INIT_STD) < 1e-3
    assert np.all(dense.bias.data == 0)
    block = nn.EncoderBlockParams.init(rng, 8, 2, 16)
    assert np.all(block.ln1_gain.data == 1) and np.all(block.ln1_bias.data == 0)
