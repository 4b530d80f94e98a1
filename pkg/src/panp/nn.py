"""Attention and embedding blocks."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, attention, gelu, layer_norm, linear

INIT_STD = 0.02


def param(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def normal_param(rng, shape, std=INIT_STD):
    return param(std * rng.normal(shape))


def zeros_param(shape):
    return param(np.zeros(shape))


def ones_param(shape):
    return param(np.ones(shape))


class ParamGroup:
    """Mixin for dataclasses whose fields are tensors or nested groups."""

    def named_parameters(self, prefix=""):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            key = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, ParamGroup):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, ParamGroup):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
        return out


@dataclass
class Dense(ParamGroup):
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, n_in, n_out, std=INIT_STD):
        return cls(normal_param(rng, (n_in, n_out), std), zeros_param((n_out,)))

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


@dataclass
class MLP(ParamGroup):
    """Dense layers with GELU between them (none after the last)."""

    layers: list

    @classmethod
    def init(cls, rng, sizes, std=INIT_STD):
        return cls([Dense.init(rng, a, b, std) for a, b in zip(sizes[:-1], sizes[1:])])

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x


@dataclass
class AttentionParams(ParamGroup):
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int = 1

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.n_heads:
            raise ContractError(f"d_model={d} not divisible by n_heads={self.n_heads}")
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            if w.shape != (d, d):
                raise ShapeError(f"attention projection must be {d}x{d}, got {w.shape}")

    @property
    def d_model(self):
        return self.w_q.shape[0]

    @classmethod
    def init(cls, rng, d_model, n_heads, std=INIT_STD):
        ws = [normal_param(rng, (d_model, d_model), std) for _ in range(4)]
        return cls(*ws, n_heads=n_heads)


@dataclass
class EncoderBlockParams(ParamGroup):
    attention: AttentionParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_in: Dense
    mlp_out: Dense

    def __post_init__(self):
        if self.mlp_in.weight.shape[1] < self.attention.d_model:
            raise ContractError("encoder MLP hidden width must be ≥ d_model")

    @classmethod
    def init(cls, rng, d_model, n_heads, mlp_hidden, std=INIT_STD):
        return cls(
            attention=AttentionParams.init(rng, d_model, n_heads, std),
            ln1_gain=ones_param((d_model,)),
            ln1_bias=zeros_param((d_model,)),
            ln2_gain=ones_param((d_model,)),
            ln2_bias=zeros_param((d_model,)),
            mlp_in=Dense.init(rng, d_model, mlp_hidden, std),
            mlp_out=Dense.init(rng, mlp_hidden, d_model, std),
        )


@dataclass
class PatchEmbedParams(ParamGroup):
    kernel: Tensor
    bias: Tensor
    patch_size: int = 1

    @classmethod
    def init(cls, rng, patch_size, d_model, channels=1, std=INIT_STD):
        width = patch_size * patch_size * channels
        return cls(normal_param(rng, (width, d_model), std), zeros_param((d_model,)), patch_size)


def scaled_dot_attention(q, k, v):
    """softmax(Q K^T / sqrt(d)) V for a single head."""
    return attention(q, k, v, n_heads=1)


def multi_head_attention(params: AttentionParams, q_in, k_in, v_in):
    q = q_in @ params.w_q
    k = k_in @ params.w_k
    v = v_in @ params.w_v
    return attention(q, k, v, n_heads=params.n_heads) @ params.w_o


def encoder_block(params: EncoderBlockParams, x):
    """Pre-norm transformer block: x + MHA(LN(x)), then + MLP(LN(.))."""
    h = layer_norm(x, params.ln1_gain, params.ln1_bias)
    x = x + multi_head_attention(params.attention, h, h, h)
    h = layer_norm(x, params.ln2_gain, params.ln2_bias)
    return x + params.mlp_out(gelu(params.mlp_in(h)))


def patch_embed(params: PatchEmbedParams, patch_pixels):
    """Shared linear map of flattened patches, i.e. a stride-P convolution."""
    width = params.kernel.shape[0]
    if patch_pixels.ndim != 2 or patch_pixels.shape[1] != width:
        raise ShapeError(f"patch rows must have width {width}, got shape {tuple(patch_pixels.shape)}")
    return linear(patch_pixels, params.kernel, params.bias)


def position_embedding(grid_h, grid_w, d_model):
    """Fixed 2-D sinusoidal embedding, one row per grid cell in row-major order.

    Channels ``[0, d/2)`` encode the row index and ``[d/2, d)`` the column
    index, each as interleaved sin/cos over a geometric frequency ladder.
    """
    if d_model % 2:
        raise ContractError(f"position embedding needs even d_model, got {d_model}")
    half = d_model // 2
    ladder = np.arange(half) // 2
    freq = 1.0 / 10000.0 ** (2.0 * ladder / half)
    use_sin = np.arange(half) % 2 == 0

    def encode(pos):
        angle = pos[:, None] * freq[None, :]
        return np.where(use_sin, np.sin(angle), np.cos(angle))

    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    return Tensor(np.concatenate([encode(rows.astype(float)), encode(cols.astype(float))], axis=1))
