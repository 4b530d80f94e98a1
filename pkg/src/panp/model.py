"""Patch attentive neural process and the NP / ANP / CNP baselines.

All variants share one pipeline:

* a deterministic path (self-attention over context tokens, mean-pooled
  global vector ``r_c``, cross-attention giving one ``r_star`` per target),
* a latent path (set encoder, mean pooling, Gaussian head for ``z``),
* an MLP decoder with GELU mapping ``[z, r_star, pos]`` to a per-target
  Gaussian.

``PANP`` works on image patches with fixed sinusoidal patch positions and
queries the cross-attention with ``r_c + pos``. ``ANP`` works on 1-D points
and queries with learned coordinate embeddings. ``NP`` drops the
deterministic path and uses an MLP set encoder. ``CNP`` is PANP with the
latent path removed.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .rng import Rng
from .tensor import ContractError, Tensor, concat, no_grad, softplus, tile_rows

VARIANTS = ("PANP", "ANP", "NP", "CNP")
PATCH_VARIANTS = ("PANP", "CNP")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "PANP"
    d_model: int = 64
    n_heads: int = 4
    depth: int = 2
    latent_dim: int = 64
    decoder_hidden: tuple = (64, 64)
    mlp_hidden: int = 128
    patch_size: int = 4
    image_side: int = 16
    x_dim: int = 1
    y_dim: int = 1
    sigma_floor: float = 0.1
    sigma_scale: float = 0.9
    init_std: float = nn.INIT_STD

    def __post_init__(self):
        object.__setattr__(self, "decoder_hidden", tuple(int(h) for h in self.decoder_hidden))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.latent_dim < 1 or self.depth < 1:
            raise ValueError("latent_dim and depth must be ≥ 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for position embeddings")
        if self.mlp_hidden < self.d_model:
            raise ValueError("mlp_hidden must be ≥ d_model")
        if self.variant in PATCH_VARIANTS:
            if self.patch_size < 1 or self.image_side % self.patch_size:
                raise ValueError(f"patch size {self.patch_size} must divide image side {self.image_side}")
        if self.sigma_floor <= 0 or self.sigma_scale < 0:
            raise ValueError("sigma_floor must be > 0 and sigma_scale ≥ 0")

    @property
    def out_dim(self):
        return self.patch_size**2 if self.variant in PATCH_VARIANTS else self.y_dim

    @property
    def has_latent(self):
        return self.variant != "CNP"

    @property
    def has_deterministic(self):
        return self.variant != "NP"

    def to_dict(self):
        d = asdict(self)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DeterministicState:
    r_i: Tensor
    r_c: Tensor
    r_star: Tensor


@dataclass
class LatentState:
    s_i: Tensor
    s: Tensor
    mu_z: Tensor
    sigma_z: Tensor
    z: Tensor | None = None


@dataclass
class PredictiveDistribution:
    mu: Tensor
    sigma: Tensor


@dataclass
class ForwardOutput:
    dist: PredictiveDistribution
    latent_ctx: LatentState | None
    latent_tgt: LatentState | None
    det: DeterministicState | None


@dataclass
class Params(nn.ParamGroup):
    det_embed: object = None
    det_blocks: list = field(default_factory=list)
    cross: object = None
    x_embed: object = None
    lat_embed: object = None
    lat_blocks: list = field(default_factory=list)
    lat_set_mlp: object = None
    lat_head: object = None
    decoder: object = None


@functools.lru_cache(maxsize=16)
def _patch_positions(grid_side, d_model):
    return nn.position_embedding(grid_side, grid_side, d_model).data


def _init_params(cfg: ModelConfig, rng):
    d, std = cfg.d_model, cfg.init_std
    point_in = cfg.x_dim + cfg.y_dim
    p = Params()

    def token_embed():
        if cfg.variant in PATCH_VARIANTS:
            return nn.PatchEmbedParams.init(rng, cfg.patch_size, d, std=std)
        return nn.Dense.init(rng, point_in, d, std)

    def blocks():
        return [nn.EncoderBlockParams.init(rng, d, cfg.n_heads, cfg.mlp_hidden, std) for _ in range(cfg.depth)]

    if cfg.variant not in PATCH_VARIANTS:
        p.x_embed = nn.Dense.init(rng, cfg.x_dim, d, std)
    if cfg.has_deterministic:
        p.det_embed = token_embed()
        p.det_blocks = blocks()
        p.cross = nn.AttentionParams.init(rng, d, cfg.n_heads, std)
    if cfg.has_latent:
        if cfg.variant == "NP":
            p.lat_set_mlp = nn.MLP.init(rng, [point_in] + [d] * (cfg.depth + 1), std)
        else:
            p.lat_embed = token_embed()
            p.lat_blocks = blocks()
        p.lat_head = nn.MLP.init(rng, [d, d, 2 * cfg.latent_dim], std)
    dec_in = (cfg.latent_dim if cfg.has_latent else 0) + (d if cfg.has_deterministic else 0) + d
    p.decoder = nn.MLP.init(rng, [dec_in, *cfg.decoder_hidden, 2 * cfg.out_dim], std)
    return p


class NeuralProcess:
    """A model instance: configuration plus parameter tensors."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.params = _init_params(cfg, rng)

    def parameters(self):
        return self.params.named_parameters()

    def latent_parameters(self):
        return {k: v for k, v in self.parameters().items() if k.startswith("lat_")}

    def load_parameters(self, table):
        own = self.parameters()
        if set(own) != set(table):
            missing = sorted(set(own) - set(table))
            extra = sorted(set(table) - set(own))
            raise ValueError(f"parameter table mismatch; missing={missing} unexpected={extra}")
        for name, tensor in own.items():
            value = np.asarray(table[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {tensor.shape}")
            tensor.data[...] = value

    # -- building blocks -------------------------------------------------

    def _sigma(self, raw):
        return self.cfg.sigma_floor + self.cfg.sigma_scale * softplus(raw)

    def deterministic_encode(self, ctx_tokens):
        if ctx_tokens.shape[0] == 0:
            raise ContractError("empty context")
        r = ctx_tokens
        for block in self.params.det_blocks:
            r = nn.encoder_block(block, r)
        return r

    def cross_attend_targets(self, r_i, r_c, tgt_pos, ctx_pos):
        """Per-target representations from the context representations ``r_i``.

        PANP/CNP query with ``r_c + tgt_pos`` against keys ``r_i + ctx_pos``;
        ANP queries with target coordinate embeddings against context
        coordinate embeddings. Values are always ``r_i``.
        """
        if r_i.shape[0] == 0:
            raise ContractError("empty context")
        if self.cfg.variant in PATCH_VARIANTS:
            query = tgt_pos + r_c
            keys = r_i + ctx_pos
        else:
            query, keys = tgt_pos, ctx_pos
        return nn.multi_head_attention(self.params.cross, query, keys, r_i)

    def latent_encode(self, tokens):
        if tokens.shape[0] == 0:
            raise ContractError("empty context")
        if self.cfg.variant == "NP":
            s_i = self.params.lat_set_mlp(tokens)
        else:
            s_i = tokens
            for block in self.params.lat_blocks:
                s_i = nn.encoder_block(block, s_i)
        s = s_i.mean(axis=0)
        head = self.params.lat_head(s)
        k = self.cfg.latent_dim
        return LatentState(s_i, s, head[:k], self._sigma(head[k:]))

    def decode(self, z, r_star, tgt_pos):
        n = tgt_pos.shape[0]
        if r_star is not None and r_star.shape[0] != n:
            raise ContractError(f"r_star has {r_star.shape[0]} rows but tgt_pos has {n}")
        parts = []
        if z is not None:
            parts.append(tile_rows(z, n))
        if r_star is not None:
            parts.append(r_star)
        parts.append(tgt_pos)
        out = self.params.decoder(concat(parts, axis=1))
        k = self.cfg.out_dim
        return PredictiveDistribution(out[:, :k], self._sigma(out[:, k:]))

    # -- embeddings ------------------------------------------------------

    def _positions(self, task):
        cfg = self.cfg
        if cfg.variant in PATCH_VARIANTS:
            g = task.side // task.patch_size
            table = _patch_positions(g, cfg.d_model)
            cells = np.array([r * g + c for r, c in task.grid], dtype=np.int64)
            return Tensor(table[cells[task.context_x]]), Tensor(table[cells[task.target_x]])
        xe = self.params.x_embed
        return xe(Tensor(task.context_x)), xe(Tensor(task.target_x))

    def _tokens(self, embed, xs, ys, pos):
        if self.cfg.variant in PATCH_VARIANTS:
            return nn.patch_embed(embed, Tensor(ys)) + pos
        return embed(Tensor(np.concatenate([xs, ys], axis=1)))

    def _check_task(self, task):
        cfg = self.cfg
        want = "patches" if cfg.variant in PATCH_VARIANTS else "points"
        if task.kind != want:
            raise ContractError(f"{cfg.variant} expects a {want} task, got {task.kind}")
        if task.n_context == 0:
            raise ContractError("empty context")
        if want == "patches" and task.patch_size != cfg.patch_size:
            raise ContractError(f"task patch size {task.patch_size} differs from model's {cfg.patch_size}")

    # -- full pipeline ---------------------------------------------------

    def forward(self, task, rng, mode="eval"):
        """Predict every target of ``task``.

        In ``train`` mode ``z`` is drawn from the target-conditioned
        posterior ``q(z | s_T)``; in ``eval`` mode from ``q(z | s_C)``.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self._check_task(task)
        cfg, p = self.cfg, self.params
        ctx_pos, tgt_pos = self._positions(task)

        det = None
        r_star = None
        if cfg.has_deterministic:
            tokens = self._tokens(p.det_embed, task.context_x, task.context_y, ctx_pos)
            r_i = self.deterministic_encode(tokens)
            r_c = r_i.mean(axis=0)
            r_star = self.cross_attend_targets(r_i, r_c, tgt_pos, ctx_pos)
            det = DeterministicState(r_i, r_c, r_star)

        latent_ctx = latent_tgt = None
        z = None
        if cfg.has_latent:
            if cfg.variant == "NP":
                ctx_in = Tensor(np.concatenate([task.context_x, task.context_y], axis=1))
                latent_ctx = self.latent_encode(ctx_in)
            else:
                latent_ctx = self.latent_encode(self._tokens(p.lat_embed, task.context_x, task.context_y, ctx_pos))
            source = latent_ctx
            if mode == "train":
                if cfg.variant == "NP":
                    tgt_in = Tensor(np.concatenate([task.target_x, task.target_y], axis=1))
                    latent_tgt = self.latent_encode(tgt_in)
                else:
                    latent_tgt = self.latent_encode(
                        self._tokens(p.lat_embed, task.target_x, task.target_y, tgt_pos)
                    )
                source = latent_tgt
            z = sample_latent(source, rng)

        dist = self.decode(z, r_star, tgt_pos)
        return ForwardOutput(dist, latent_ctx, latent_tgt, det)

    def predict(self, task, rng):
        """Eval-mode predictive means and scales as numpy arrays."""
        with no_grad():
            out = self.forward(task, rng, mode="eval")
        return out.dist.mu.data.copy(), out.dist.sigma.data.copy()


def sample_latent(state: LatentState, rng):
    """Reparameterised draw ``z = mu + sigma * eps``; gradients skip ``eps``."""
    eps = Tensor(rng.normal(state.mu_z.shape))
    state.z = state.mu_z + state.sigma_z * eps
    return state.z


def build_model(cfg: ModelConfig, seed=0):
    return NeuralProcess(cfg, Rng(seed).derive(2))


__all__ = [
    "ModelConfig",
    "NeuralProcess",
    "DeterministicState",
    "LatentState",
    "PredictiveDistribution",
    "ForwardOutput",
    "sample_latent",
    "build_model",
]
