"""ELBO objective, Adam, the training loop and evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelConfig, NeuralProcess
from .rng import Rng
from .tasks import TaskConfig, context_count, make_image_task, patchify, split_context_target_patches
from .tensor import ContractError, Tensor, as_tensor, backward, log, no_grad, square

logger = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# stream keys for Rng.derive
TRAIN_STREAM = 0
EVAL_STREAM = 1
INIT_STREAM = 2


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


def gaussian_nll(y, mu, sigma):
    """Summed negative log density of ``y`` under independent ``N(mu, sigma^2)``."""
    y, mu, sigma = as_tensor(y), as_tensor(mu), as_tensor(sigma)
    if not (y.shape == mu.shape == sigma.shape):
        raise ContractError(f"shape mismatch: y{y.shape} mu{mu.shape} sigma{sigma.shape}")
    if np.any(sigma.data <= 0):
        raise ContractError("gaussian_nll requires sigma > 0")
    z = (y - mu) / sigma
    return (log(sigma) + 0.5 * square(z)).sum() + HALF_LOG_2PI * y.size


def kl_diag_gaussians(mu_q, sigma_q, mu_p, sigma_p):
    """KL(q || p) between diagonal Gaussians, summed over dimensions."""
    mu_q, sigma_q, mu_p, sigma_p = (as_tensor(t) for t in (mu_q, sigma_q, mu_p, sigma_p))
    if np.any(sigma_q.data <= 0) or np.any(sigma_p.data <= 0):
        raise ContractError("kl_diag_gaussians requires positive sigmas")
    var_ratio = square(sigma_q / sigma_p)
    mean_term = square((mu_q - mu_p) / sigma_p)
    return (log(sigma_p) - log(sigma_q) + 0.5 * (var_ratio + mean_term) - 0.5).sum()


@dataclass
class LossTerms:
    loss: Tensor
    nll: float
    kl: float


def elbo_loss(out, task, kl_weight=1.0):
    """Negative ELBO per target output scalar.

    ``out`` must come from a train-mode forward pass so that ``z`` was drawn
    from ``q(z | s_T)``. Returned ``nll`` and ``kl`` are normalised the same
    way, so ``loss == nll + kl_weight * kl``.
    """
    n = task.target_y.size
    nll = gaussian_nll(task.target_y, out.dist.mu, out.dist.sigma)
    if out.latent_tgt is None:
        if out.latent_ctx is not None:
            raise ContractError("elbo_loss needs a train-mode forward (target latent missing)")
        return LossTerms(nll * (1.0 / n), float(nll.data) / n, 0.0)
    q, p = out.latent_tgt, out.latent_ctx
    kl = kl_diag_gaussians(q.mu_z, q.sigma_z, p.mu_z, p.sigma_z)
    loss = (nll + kl_weight * kl) * (1.0 / n)
    return LossTerms(loss, float(nll.data) / n, float(kl.data) / n)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_interval: int = 50
    kl_weight: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be ≥ 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("batch_size and eval_interval must be ≥ 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update, applied in place to ``params``."""
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


@dataclass
class StepMetrics:
    step: int
    loss: float
    nll: float
    kl: float


@dataclass
class TrainResult:
    model: NeuralProcess
    checkpoint: object
    history: list
    seconds: float = 0.0  # wall time spent in train()

    def smoothed_loss(self, window=100):
        losses = np.array([h.loss for h in self.history])
        return np.convolve(losses, np.ones(window) / window, mode="valid")


def _format_row(row):
    return f"{row.step},{row.loss:.17g},{row.nll:.17g},{row.kl:.17g}\n"


def episode_rng(seed, index):
    return Rng(seed, TRAIN_STREAM, index)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, task_cfg: TaskConfig, metrics_path=None, meta=None):
    """Optimise the negative ELBO on freshly sampled episodes.

    Each episode ``i`` (counted across steps) owns the stream
    ``Rng(seed, 0, i)``, which draws the task and the latent noise.
    A CSV with header ``step,loss,nll,kl`` receives one row per
    ``eval_interval`` steps holding the window means.
    """
    from .checkpoint import Checkpoint

    start = time.perf_counter()
    model = NeuralProcess(model_cfg, Rng(train_cfg.seed, INIT_STREAM))
    params = model.parameters()
    adam = AdamState()
    history = []
    window = []
    fh = open(metrics_path, "w", newline="") if metrics_path is not None else None
    try:
        if fh:
            fh.write("step,loss,nll,kl\n")
        for step in range(1, train_cfg.steps + 1):
            for p in params.values():
                p.grad = None
            terms = []
            for b in range(train_cfg.batch_size):
                rng = episode_rng(train_cfg.seed, (step - 1) * train_cfg.batch_size + b)
                task = task_cfg.sample(rng, model_cfg.patch_size)
                out = model.forward(task, rng, mode="train")
                terms.append(elbo_loss(out, task, train_cfg.kl_weight))
            total = terms[0].loss
            for t in terms[1:]:
                total = total + t.loss
            total = total * (1.0 / len(terms))
            value = float(total.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(step, value)
            backward(total)
            adam_step(params, {k: p.grad for k, p in params.items()}, adam, train_cfg)
            row = StepMetrics(
                step,
                value,
                sum(t.nll for t in terms) / len(terms),
                sum(t.kl for t in terms) / len(terms),
            )
            history.append(row)
            window.append(row)
            if step % train_cfg.eval_interval == 0 or step == train_cfg.steps:
                mean_row = StepMetrics(
                    step,
                    float(np.mean([r.loss for r in window])),
                    float(np.mean([r.nll for r in window])),
                    float(np.mean([r.kl for r in window])),
                )
                window = []
                logger.info("step %d loss %.4f nll %.4f kl %.4f", *asdict(mean_row).values())
                if fh:
                    fh.write(_format_row(mean_row))
                    fh.flush()
    finally:
        if fh:
            fh.close()

    next_rng = episode_rng(train_cfg.seed, train_cfg.steps * train_cfg.batch_size)
    ckpt = Checkpoint(
        model_config=model_cfg,
        params={k: p.data.copy() for k, p in params.items()},
        adam=adam,
        rng_state=next_rng.get_state(),
        step=train_cfg.steps,
        meta={"train": train_cfg.to_dict(), "task": task_cfg.to_dict(), **(meta or {})},
    )
    return TrainResult(model, ckpt, history, time.perf_counter() - start)


# -- evaluation ---------------------------------------------------------


@dataclass
class EvalRow:
    fraction: float | None
    nll: float
    mse: float
    context_mse: float
    n_tasks: int


@dataclass
class EvalReport:
    rows: list

    @property
    def nll(self):
        return float(np.mean([r.nll for r in self.rows]))

    @property
    def mse(self):
        return float(np.mean([r.mse for r in self.rows]))

    def table(self):
        lines = [f"{'fraction':>9} {'nll':>12} {'mse':>12} {'ctx_mse':>12} {'tasks':>6}"]
        for r in self.rows:
            frac = "native" if r.fraction is None else f"{r.fraction:.3f}"
            lines.append(f"{frac:>9} {r.nll:>12.6f} {r.mse:>12.6f} {r.context_mse:>12.6f} {r.n_tasks:>6}")
        return "\n".join(lines)

    def to_csv(self):
        out = ["fraction,nll,mse\n"]
        for r in self.rows:
            frac = "native" if r.fraction is None else f"{r.fraction:.17g}"
            out.append(f"{frac},{r.nll:.17g},{r.mse:.17g}\n")
        return "".join(out)


def score(model, task, rng):
    """Eval-mode NLL per output scalar, target MSE and context MSE."""
    with no_grad():
        out = model.forward(task, rng, mode="eval")
        nll = float(gaussian_nll(task.target_y, out.dist.mu, out.dist.sigma).data) / task.target_y.size
    err = (out.dist.mu.data - task.target_y) ** 2
    return nll, float(err.mean()), float(err[task.context_idx].mean())


def eval_tasks(task_cfg: TaskConfig, patch_size, n_tasks, ctx_fractions, seed):
    """Yield ``(fraction_index, task, rng)`` for every evaluation episode.

    All fractions reuse the same underlying functions/images, so per-fraction
    numbers are paired comparisons.
    """
    for i in range(n_tasks):
        base = Rng(seed, EVAL_STREAM, i)
        if task_cfg.kind == "image":
            img = make_image_task(base, task_cfg.side, task_cfg.kernel)
            rows, grid = patchify(img, patch_size)
            native = None
        else:
            native = task_cfg.sample(base)
        for k, frac in enumerate(ctx_fractions):
            rng = base.derive(k)
            if frac is None:
                if native is None:
                    frac = float(np.mean(task_cfg.ctx_fraction_range))
                    yield k, split_context_target_patches(rows, grid, rng, frac, task_cfg.side), rng
                else:
                    yield k, native, rng
            elif task_cfg.kind == "image":
                yield k, split_context_target_patches(rows, grid, rng, frac, task_cfg.side), rng
            else:
                n = native.n_target
                yield k, native.with_context(rng.choice(n, context_count(n, frac))), rng


def evaluate(model, task_cfg: TaskConfig, n_tasks, ctx_fractions, seed=12345):
    """Aggregate eval-mode NLL / MSE per context fraction.

    A fraction of ``None`` keeps the task family's own context distribution.
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be ≥ 1")
    fractions = list(ctx_fractions)
    acc = [[] for _ in fractions]
    for k, task, rng in eval_tasks(task_cfg, model.cfg.patch_size, n_tasks, fractions, seed):
        acc[k].append(score(model, task, rng))
    rows = []
    for frac, scores in zip(fractions, acc):
        s = np.array(scores)
        rows.append(EvalRow(frac, float(s[:, 0].mean()), float(s[:, 1].mean()), float(s[:, 2].mean()), len(s)))
    return EvalReport(rows)


def constant_predictor_nll(targets, mean=0.5, std=0.3):
    """Per-scalar NLL of the fixed reference predictor ``N(mean, std^2)``."""
    targets = np.asarray(targets, dtype=np.float64)
    return float(HALF_LOG_2PI + math.log(std) + np.mean((targets - mean) ** 2) / (2.0 * std * std))


def model_from_checkpoint(ckpt):
    model = NeuralProcess(ckpt.model_config, Rng(0, INIT_STREAM))
    model.load_parameters(ckpt.params)
    return model
