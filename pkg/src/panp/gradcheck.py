"""Central-difference gradient checks for every differentiable op and the full ELBO."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .model import ModelConfig, NeuralProcess
from .rng import Rng
from .tasks import TaskBatch, make_image_task, patchify
from .training import elbo_loss, gaussian_nll, kl_diag_gaussians

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self):
        return self.error < TOLERANCE


def _rand(rng, *shape, scale=1.0):
    return T.Tensor(scale * rng.normal(shape))


def _positive(rng, *shape):
    return T.Tensor(0.5 + rng.uniform(0.0, 1.5, shape))


def toy_patch_task(n_context=2, n_target=2, seed=0):
    """A 4x4 image cut into 2x2 patches; the first ``n_target`` patches are targets."""
    img = make_image_task(Rng(seed), 4)
    rows, grid = patchify(img, 2)
    tgt = np.arange(n_target)
    ctx = np.arange(n_context)
    return TaskBatch("patches", tgt[ctx], rows[ctx], tgt, rows[tgt], ctx, 4, 2, tuple(grid))


def toy_model(variant="PANP", seed=0):
    cfg = ModelConfig(
        variant=variant,
        d_model=8,
        n_heads=2,
        depth=1,
        latent_dim=4,
        decoder_hidden=(8,),
        mlp_hidden=8,
        patch_size=2,
        image_side=4,
        # large enough that no attention gradient drowns in difference noise,
        # small enough that the softmax does not saturate
        init_std=0.3,
    )
    return NeuralProcess(cfg, Rng(seed))


def _elbo_check(n_context, n_target):
    model = toy_model()
    task = toy_patch_task(n_context, n_target)

    def f(*_):
        return elbo_loss(model.forward(task, Rng(7), mode="train"), task).loss

    return T.grad_check(f, list(model.parameters().values()))


def _block_check(rng):
    block = nn.EncoderBlockParams.init(rng, 8, 2, 12, std=0.4)
    x = _rand(rng, 5, 8)
    params = [x] + list(block.named_parameters().values())
    return T.grad_check(lambda *_: T.tsum(T.square(nn.encoder_block(block, x))), params)


def _mha_check(rng):
    attn = nn.AttentionParams.init(rng, 8, 4, std=0.4)
    q, k, v = _rand(rng, 3, 8), _rand(rng, 5, 8), _rand(rng, 5, 8)
    params = [q, k, v] + list(attn.named_parameters().values())
    return T.grad_check(lambda *_: T.tsum(T.square(nn.multi_head_attention(attn, q, k, v))), params)


def checks():
    """Named callables ``fn(rng) -> max relative error``."""
    return {
        "matmul 3x4.4x2": lambda rng: T.grad_check(lambda a, b: (a @ b).sum(), [_rand(rng, 3, 4), _rand(rng, 4, 2)]),
        "matmul 1x5.5x3": lambda rng: T.grad_check(
            lambda a, b: T.square(a @ b).sum(), [_rand(rng, 1, 5), _rand(rng, 5, 3)]
        ),
        "matmul vec.4x3": lambda rng: T.grad_check(lambda a, b: T.square(a @ b).sum(), [_rand(rng, 4), _rand(rng, 4, 3)]),
        "add/sub broadcast": lambda rng: T.grad_check(
            lambda a, b, c: T.square(a + b - c).sum(), [_rand(rng, 3, 4), _rand(rng, 4), _rand(rng)]
        ),
        "mul/div broadcast": lambda rng: T.grad_check(
            lambda a, b, c: T.square(a * b / c).sum(), [_rand(rng, 3, 4), _rand(rng, 4), _positive(rng, 3, 4)]
        ),
        "exp/log": lambda rng: T.grad_check(lambda a: (T.exp(a) + T.log(T.exp(a) + 1.0)).sum(), _rand(rng, 2, 3)),
        "sum/mean axis": lambda rng: T.grad_check(
            lambda a: T.square(a.sum(axis=0)).sum() + T.square(a.mean(axis=1)).sum(), _rand(rng, 3, 4)
        ),
        "reshape/transpose": lambda rng: T.grad_check(
            lambda a: T.square(a.reshape(4, 3).T @ _rand(Rng(1), 4, 2)).sum(), _rand(rng, 2, 6)
        ),
        "getitem/concat/tile_rows": lambda rng: T.grad_check(
            lambda a, v: T.square(T.concat([a[1:, :2], T.tile_rows(v, 2)], axis=1)).sum(),
            [_rand(rng, 3, 4), _rand(rng, 3)],
        ),
        "softmax 2x5 last axis": lambda rng: T.grad_check(
            lambda a: (T.softmax(a, -1) * _rand(Rng(3), 2, 5)).sum(), _rand(rng, 2, 5)
        ),
        "softmax 4x3 axis 0": lambda rng: T.grad_check(
            lambda a: (T.softmax(a, 0) * _rand(Rng(4), 4, 3)).sum(), _rand(rng, 4, 3)
        ),
        "gelu 2x3": lambda rng: T.grad_check(lambda a: (T.gelu(a) * _rand(Rng(5), 2, 3)).sum(), _rand(rng, 2, 3, scale=2)),
        "gelu 7": lambda rng: T.grad_check(lambda a: T.square(T.gelu(a)).sum(), _rand(rng, 7, scale=2)),
        "softplus 2x3": lambda rng: T.grad_check(
            lambda a: (T.softplus(a) * _rand(Rng(6), 2, 3)).sum(), _rand(rng, 2, 3, scale=3)
        ),
        "softplus 5": lambda rng: T.grad_check(lambda a: T.square(T.softplus(a)).sum(), _rand(rng, 5, scale=3)),
        "layer_norm 3x6": lambda rng: T.grad_check(
            lambda x, g, b: (T.layer_norm(x, g, b) * _rand(Rng(8), 3, 6)).sum(),
            [_rand(rng, 3, 6), _rand(rng, 6), _rand(rng, 6)],
        ),
        "layer_norm 5": lambda rng: T.grad_check(
            lambda x, g, b: T.square(T.layer_norm(x, g, b) - 0.3).sum(),
            [_rand(rng, 5), _rand(rng, 5), _rand(rng, 5)],
        ),
        "scaled_dot_attention 3x4,5x4": lambda rng: T.grad_check(
            lambda q, k, v: T.square(nn.scaled_dot_attention(q, k, v)).sum(),
            [_rand(rng, 3, 4), _rand(rng, 5, 4), _rand(rng, 5, 4)],
        ),
        "scaled_dot_attention 1x6,2x6": lambda rng: T.grad_check(
            lambda q, k, v: T.square(nn.scaled_dot_attention(q, k, v)).sum(),
            [_rand(rng, 1, 6), _rand(rng, 2, 6), _rand(rng, 2, 6)],
        ),
        "multi_head_attention": lambda rng: _mha_check(rng),
        "encoder_block": lambda rng: _block_check(rng),
        "patch_embed": lambda rng: T.grad_check(
            lambda x, k, b: T.square(nn.patch_embed(nn.PatchEmbedParams(k, b, 2), x)).sum(),
            [T.Tensor(rng.uniform(0, 1, (3, 4))), _rand(rng, 4, 6), _rand(rng, 6)],
        ),
        "gaussian_nll": lambda rng: T.grad_check(
            lambda y, mu, s: gaussian_nll(y, mu, s), [_rand(rng, 4, 2), _rand(rng, 4, 2), _positive(rng, 4, 2)]
        ),
        "kl_diag_gaussians": lambda rng: T.grad_check(
            kl_diag_gaussians, [_rand(rng, 5), _positive(rng, 5), _rand(rng, 5), _positive(rng, 5)]
        ),
        "decode + gaussian_nll": lambda rng: _decode_check(),
        "PANP ELBO (2 ctx / 2 tgt)": lambda rng: _elbo_check(2, 2),
        "PANP ELBO (1 ctx / 2 tgt)": lambda rng: _elbo_check(1, 2),
    }


def _decode_check():
    model = toy_model()
    rng = Rng(11)
    z, r_star, pos = _rand(rng, 4), _rand(rng, 3, 8), _rand(rng, 3, 8)
    y = rng.uniform(0, 1, (3, 4))
    params = [z, r_star] + list(model.params.decoder.named_parameters().values())

    def f(*_):
        dist = model.decode(z, r_star, pos)
        return gaussian_nll(y, dist.mu, dist.sigma)

    return T.grad_check(f, params)


def run_suite(names=None, report=None):
    results = []
    for i, (name, fn) in enumerate(checks().items()):
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        err = float(fn(Rng(2024, i)))
        results.append(CheckResult(name, err, time.perf_counter() - t0))
        if report is not None:
            report(results[-1])
    return results
