"""Meta-learning episodes drawn from Gaussian processes.

Two task families are produced: 1-D function regression (points) and 2-D
grayscale images sampled from a GP over the pixel grid, cut into patches.
Every generator takes an explicit :class:`~panp.rng.Rng`, so episodes are
reproducible from a seed.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

MAX_JITTER = 1e-2


class GPError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    lengthscale: float = 0.2
    signal_var: float = 1.0
    noise_std: float = 0.02
    jitter: float = 1e-6

    def __post_init__(self):
        if self.lengthscale <= 0 or self.signal_var <= 0 or self.jitter <= 0:
            raise ValueError("lengthscale, signal_var and jitter must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class SampledFunction:
    inputs: np.ndarray  # (n, d_in)
    clean: np.ndarray  # (n,)
    noisy: np.ndarray  # (n,)


@dataclass(frozen=True)
class TaskBatch:
    """One episode: a context set and a target set with contexts among the targets.

    For ``kind == "points"`` the inputs are ``(n, x_dim)`` coordinates and the
    outputs ``(n, 1)``. For ``kind == "patches"`` the inputs are patch indices
    into ``grid`` and the outputs are ``(n, P*P)`` flattened pixel rows.
    """

    kind: str
    context_x: np.ndarray
    context_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    context_idx: np.ndarray
    side: int | None = None
    patch_size: int | None = None
    grid: tuple | None = None

    @property
    def n_context(self):
        return len(self.context_idx)

    @property
    def n_target(self):
        return len(self.target_x)

    def with_context(self, context_idx):
        """Same targets, a different context subset (indices into the targets)."""
        idx = np.asarray(context_idx, dtype=np.int64)
        return TaskBatch(
            self.kind,
            self.target_x[idx],
            self.target_y[idx],
            self.target_x,
            self.target_y,
            idx,
            self.side,
            self.patch_size,
            self.grid,
        )


def rbf_kernel(x1, x2, cfg: KernelConfig):
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    if x1.shape[1] != x2.shape[1]:
        raise ValueError(f"input dims disagree: {x1.shape} vs {x2.shape}")
    sq = ((x1[:, None, :] - x2[None, :, :]) ** 2).sum(axis=-1)
    return cfg.signal_var * np.exp(-sq / (2.0 * cfg.lengthscale**2))


def gp_factor(xs, cfg: KernelConfig):
    """Cholesky factor of ``K(xs, xs) + jitter*I``, escalating jitter x10 up to 1e-2."""
    k = rbf_kernel(xs, xs, cfg)
    eye = np.eye(len(k))
    jitter = cfg.jitter
    while jitter <= MAX_JITTER * (1 + 1e-9):
        try:
            return np.linalg.cholesky(k + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GPError(f"Cholesky failed for {len(k)} points even with jitter {MAX_JITTER}")


def gp_sample(xs, cfg: KernelConfig, rng, factor=None):
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if len(xs) < 1:
        raise ValueError("gp_sample needs at least one input")
    chol = gp_factor(xs, cfg) if factor is None else factor
    clean = chol @ rng.normal(len(xs))
    noisy = clean + cfg.noise_std * rng.normal(len(xs)) if cfg.noise_std > 0 else clean.copy()
    return SampledFunction(xs, clean, noisy)


def make_1d_task(rng, n_ctx_range=(3, 10), n_tgt=50, x_range=(-2.0, 2.0), cfg=None):
    cfg = cfg or KernelConfig()
    lo, hi = n_ctx_range
    if not 1 <= lo <= hi <= n_tgt:
        raise ValueError(f"invalid context range {n_ctx_range} for {n_tgt} targets")
    xs = rng.uniform(x_range[0], x_range[1], (n_tgt, 1))
    fn = gp_sample(xs, cfg, rng)
    n_ctx = rng.integers(lo, hi)
    ctx = np.asarray(rng.choice(n_tgt, n_ctx), dtype=np.int64)
    ys = fn.noisy[:, None]
    return TaskBatch("points", xs[ctx], ys[ctx], xs, ys, ctx)


def pixel_grid(side):
    coords = np.linspace(0.0, 1.0, side) if side > 1 else np.zeros(1)
    rr, cc = np.meshgrid(coords, coords, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


@functools.lru_cache(maxsize=8)
def _grid_factor(side, cfg):
    return gp_factor(pixel_grid(side), cfg)


def make_image_task(rng, side=16, cfg=None):
    """A ``side x side`` GP image, affinely rescaled to [0, 1]."""
    cfg = cfg or KernelConfig()
    if side < 1:
        raise ValueError("side must be positive")
    fn = gp_sample(pixel_grid(side), cfg, rng, factor=_grid_factor(side, cfg))
    values = fn.noisy
    span = values.max() - values.min()
    img = (values - values.min()) / span if span > 0 else np.full_like(values, 0.5)
    return img.reshape(side, side)


def patchify(img, patch_size):
    img = np.asarray(img, dtype=np.float64)
    side = img.shape[0]
    if img.ndim != 2 or img.shape[1] != side:
        raise ValueError(f"expected a square image, got shape {img.shape}")
    if patch_size < 1 or side % patch_size:
        raise ValueError(f"patch size {patch_size} does not divide image side {side}")
    g = side // patch_size
    rows = img.reshape(g, patch_size, g, patch_size).transpose(0, 2, 1, 3).reshape(g * g, -1)
    grid = [(r, c) for r in range(g) for c in range(g)]
    return np.ascontiguousarray(rows), grid


def unpatchify(patch_rows, grid_coords, patch_size, side):
    patch_rows = np.asarray(patch_rows, dtype=np.float64)
    g = side // patch_size
    if side % patch_size or len(patch_rows) != g * g or len(grid_coords) != g * g:
        raise ValueError(
            f"{len(patch_rows)} patches / {len(grid_coords)} coords inconsistent with side {side}, P {patch_size}"
        )
    if patch_rows.shape[1] != patch_size * patch_size:
        raise ValueError(f"patch rows have width {patch_rows.shape[1]}, expected {patch_size * patch_size}")
    img = np.empty((side, side))
    for row, (r, c) in zip(patch_rows, grid_coords):
        img[r * patch_size : (r + 1) * patch_size, c * patch_size : (c + 1) * patch_size] = row.reshape(
            patch_size, patch_size
        )
    return img


def context_count(n, fraction):
    if not 0 < fraction <= 1:
        raise ValueError(f"context fraction must be in (0, 1], got {fraction}")
    # guard against 0.1*30 = 3.0000000000000004 style round-up
    return max(1, min(n, math.ceil(round(fraction * n, 9))))


def split_context_target_patches(patch_rows, grid_coords, rng, ctx_fraction, side=None):
    n = len(patch_rows)
    patch_size = int(round(math.sqrt(patch_rows.shape[1])))
    if side is None:
        side = (max(r for r, _ in grid_coords) + 1) * patch_size
    ctx = np.asarray(rng.choice(n, context_count(n, ctx_fraction)), dtype=np.int64)
    idx = np.arange(n, dtype=np.int64)
    return TaskBatch(
        "patches",
        idx[ctx],
        patch_rows[ctx],
        idx,
        np.asarray(patch_rows, dtype=np.float64),
        ctx,
        side,
        patch_size,
        tuple(grid_coords),
    )


def make_patch_task(rng, side, patch_size, ctx_fraction, cfg=None):
    """Sample an image, patchify it and split contexts from targets."""
    img = make_image_task(rng, side, cfg)
    rows, grid = patchify(img, patch_size)
    return split_context_target_patches(rows, grid, rng, ctx_fraction, side)


@dataclass(frozen=True)
class TaskConfig:
    """Where training and evaluation episodes come from.

    ``kind`` is ``"image"`` (patch tasks on GP images) or ``"1d"`` (point
    tasks on GP functions). ``kernel=None`` picks the family default.
    """

    kind: str = "image"
    side: int = 16
    ctx_fraction_range: tuple = (0.1, 0.5)
    n_ctx_range: tuple = (3, 10)
    n_tgt: int = 50
    x_range: tuple = (-2.0, 2.0)
    kernel: KernelConfig | None = None

    def __post_init__(self):
        if self.kind not in ("image", "1d"):
            raise ValueError(f"task kind must be 'image' or '1d', got {self.kind!r}")
        for name in ("ctx_fraction_range", "n_ctx_range", "x_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lo, hi = self.ctx_fraction_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"invalid context fraction range {self.ctx_fraction_range}")
        if self.kernel is None:
            # 1-D inputs span [-2, 2] rather than [0, 1]
            default = KernelConfig() if self.kind == "image" else KernelConfig(lengthscale=0.6)
            object.__setattr__(self, "kernel", default)
        if self.kind == "image" and not 1 <= self.side <= 32:
            raise ValueError(f"image side must be in [1, 32], got {self.side}")

    def sample(self, rng, patch_size=None):
        if self.kind == "1d":
            return make_1d_task(rng, self.n_ctx_range, self.n_tgt, self.x_range, self.kernel)
        fraction = rng.uniform(*self.ctx_fraction_range)
        return make_patch_task(rng, self.side, patch_size, fraction, self.kernel)

    def to_dict(self):
        return {
            "kind": self.kind,
            "side": self.side,
            "ctx_fraction_range": list(self.ctx_fraction_range),
            "n_ctx_range": list(self.n_ctx_range),
            "n_tgt": self.n_tgt,
            "x_range": list(self.x_range),
            "kernel": {
                "lengthscale": self.kernel.lengthscale,
                "signal_var": self.kernel.signal_var,
                "noise_std": self.kernel.noise_std,
                "jitter": self.kernel.jitter,
            },
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("kernel") is not None:
            d["kernel"] = KernelConfig(**d["kernel"])
        return cls(**d)
