"""Command-line front end: ``panp train | eval | reconstruct | gen-data | grad-check``.

Exit codes: 0 ok, 2 usage/config error, 3 numerical abort, 4 I/O or
corrupted input. Every error exit prints one line starting with ``error:``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import PATCH_VARIANTS, ModelConfig
from .pgm import PGMError, load_image, to_bytes_image, write_pgm
from .rng import Rng
from .tasks import GPError, KernelConfig, TaskConfig, make_image_task, patchify, split_context_target_patches, unpatchify
from .training import NonFiniteLossError, TrainConfig, evaluate, model_from_checkpoint, score, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

log = logging.getLogger("panp")


class UsageError(Exception):
    pass


class CliIOError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"error: {message}\n")


# -- run configuration ----------------------------------------------------

_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "task": TaskConfig,
    "kernel": KernelConfig,
}
_PATH_KEYS = ("paths.out", "paths.checkpoint", "paths.metrics")


def default_flat_config():
    flat = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if section == "task" and f.name == "kernel":
                continue
            if section == "model" and f.name == "image_side":
                continue  # follows task.side
            if section == "train" and f.name == "seed":
                continue  # top-level seed
            # kernel keys stay unset so the task family picks its own default
            value = None if section == "kernel" else f.default
            flat[f"{section}.{f.name}"] = list(value) if isinstance(value, tuple) else value
    flat.update({"paths.out": "run", "paths.checkpoint": None, "paths.metrics": None, "seed": 0})
    return flat


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    task: TaskConfig
    out: Path
    checkpoint: Path
    metrics: Path
    seed: int
    flat: dict


def _coerce(key, value, default):
    if key.startswith("paths."):
        return None if value is None else str(value)
    if key.startswith("kernel.") and value is not None:
        default = 0.0
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            raise UsageError(f"config key {key!r}: cannot parse {value!r}") from None
    if isinstance(default, bool) or default is None or value is None:
        return value
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise UsageError(f"config key {key!r} expects an integer, got {value!r}")
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        value = float(value)
    if isinstance(default, list) and not isinstance(value, list):
        raise UsageError(f"config key {key!r} expects a list, got {value!r}")
    return value


def resolve_config(config_path=None, overrides=None):
    """Defaults, then the JSON file, then CLI overrides (all flat dotted keys)."""
    flat = default_flat_config()
    layers = []
    if config_path is not None:
        try:
            with open(config_path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {config_path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object with flat dotted keys")
        layers.append(doc)
    layers.append(overrides or {})
    for layer in layers:
        for key, value in layer.items():
            if key not in flat:
                raise UsageError(f"unknown config key {key!r}")
            flat[key] = _coerce(key, value, default_flat_config()[key])
    return build_run_config(flat)


def build_run_config(flat):
    def section(name):
        prefix = name + "."
        return {k[len(prefix) :]: v for k, v in flat.items() if k.startswith(prefix)}

    try:
        task = TaskConfig(**section("task"))
        kernel_overrides = {k: v for k, v in section("kernel").items() if v is not None}
        if kernel_overrides:
            task = replace(task, kernel=replace(task.kernel, **kernel_overrides))
        model = ModelConfig(**section("model"), image_side=task.side)
        train_cfg = TrainConfig(**section("train"), seed=int(flat["seed"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    want = "image" if model.variant in PATCH_VARIANTS else "1d"
    if task.kind != want:
        raise UsageError(f"variant {model.variant} needs task.kind={want!r}, got {task.kind!r}")
    out = Path(flat["paths.out"])
    checkpoint = Path(flat["paths.checkpoint"] or out / "checkpoint.panp")
    metrics = Path(flat["paths.metrics"] or out / "metrics.csv")
    effective = dict(flat)
    for f in fields(KernelConfig):
        effective[f"kernel.{f.name}"] = getattr(task.kernel, f.name)
    return RunConfig(model, train_cfg, task, out, checkpoint, metrics, int(flat["seed"]), effective)


def _parse_set(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key] = value
    return out


# -- commands -------------------------------------------------------------


def cmd_train(args):
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["train.steps"] = args.steps
    if args.out is not None:
        overrides["paths.out"] = args.out
    if args.checkpoint is not None:
        overrides["paths.checkpoint"] = args.checkpoint
    run = resolve_config(args.config, overrides)
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        for p in (run.checkpoint, run.metrics):
            if not p.parent.is_dir():
                raise UsageError(f"directory {p.parent} does not exist")
        with open(run.out / "config.json", "w") as fh:
            json.dump(run.flat, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise CliIOError(f"cannot prepare output directory {run.out}: {exc.strerror}") from None
    log.info("training %s for %d steps (seed %d)", run.model.variant, run.train.steps, run.seed)
    result = train(run.model, run.train, run.task, metrics_path=run.metrics)
    save_checkpoint(run.checkpoint, result.checkpoint)
    log.info("wrote %s and %s", run.checkpoint, run.metrics)
    print(f"checkpoint {run.checkpoint}")
    print(f"final_loss {result.history[-1].loss:.6f}")
    return EXIT_OK


def _load(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliIOError(f"checkpoint {path} not found") from None
    except CheckpointError as exc:
        raise CliIOError(str(exc)) from None
    except OSError as exc:
        raise CliIOError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def _task_config(ckpt):
    if "task" in ckpt.meta:
        return TaskConfig.from_dict(ckpt.meta["task"])
    kind = "image" if ckpt.model_config.variant in PATCH_VARIANTS else "1d"
    return TaskConfig(kind=kind, side=ckpt.model_config.image_side)


def _parse_fractions(text):
    try:
        fractions = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--fractions must be comma-separated numbers, got {text!r}") from None
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise UsageError("every context fraction must lie in (0, 1]")
    return fractions


def cmd_eval(args):
    fractions = _parse_fractions(args.fractions)
    if args.n_tasks < 1:
        raise UsageError("--n-tasks must be ≥ 1")
    ckpt = _load(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    task_cfg = _task_config(ckpt)
    report = evaluate(model, task_cfg, args.n_tasks, fractions, seed=args.seed)
    print(report.table())
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(report.to_csv())
    except OSError as exc:
        raise CliIOError(f"cannot write {out / 'eval.csv'}: {exc.strerror}") from None
    return EXIT_OK


def _mask_image(img, task):
    p = task.patch_size
    masked = np.full_like(img, 128.0 / 255.0)
    for i in task.context_idx:
        r, c = task.grid[i]
        masked[r * p : (r + 1) * p, c * p : (c + 1) * p] = img[r * p : (r + 1) * p, c * p : (c + 1) * p]
    return masked


def reconstruct(model, img, ctx_fraction, seed):
    """Predict every patch from a random context subset; returns (task, reconstruction, mse)."""
    p = model.cfg.patch_size
    side = img.shape[0]
    if side % p:
        raise UsageError(f"patch size {p} does not divide image side {side}")
    rows, grid = patchify(img, p)
    rng = Rng(seed)
    task = split_context_target_patches(rows, grid, rng, ctx_fraction, side)
    mu, _ = model.predict(task, rng)
    recon = unpatchify(np.clip(mu, 0.0, 1.0), grid, p, side)
    return task, recon, float(np.mean((recon - img) ** 2))


def cmd_reconstruct(args):
    if not 0 < args.ctx_fraction <= 1:
        raise UsageError("--ctx-fraction must lie in (0, 1]")
    if (args.input is None) == (not args.synthetic):
        raise UsageError("give exactly one of --input PATH or --synthetic")
    ckpt = _load(args.checkpoint)
    if ckpt.model_config.variant not in PATCH_VARIANTS:
        raise UsageError(f"reconstruct needs a patch model, checkpoint holds {ckpt.model_config.variant}")
    model = model_from_checkpoint(ckpt)
    if args.synthetic:
        task_cfg = _task_config(ckpt)
        img = make_image_task(Rng(args.seed, 3), task_cfg.side, task_cfg.kernel)
        img = to_bytes_image(img) / 255.0
    else:
        try:
            img = load_image(args.input)
        except FileNotFoundError:
            raise CliIOError(f"input image {args.input} not found") from None
        except PGMError as exc:
            raise CliIOError(f"{args.input}: {exc}") from None
    task, recon, mse = reconstruct(model, img, args.ctx_fraction, args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_pgm(out / "original.pgm", to_bytes_image(img))
        write_pgm(out / "mask.pgm", to_bytes_image(_mask_image(img, task)))
        write_pgm(out / "reconstruction.pgm", to_bytes_image(recon))
    except OSError as exc:
        raise CliIOError(f"cannot write images to {out}: {exc.strerror}") from None
    print(f"contexts {task.n_context}/{task.n_target}")
    print(f"target_mse {mse:.6f}")
    return EXIT_OK


def cmd_gen_data(args):
    if args.n < 1:
        raise UsageError("--n must be ≥ 1")
    if not 1 <= args.side <= 32:
        raise UsageError("--side must lie in [1, 32]")
    try:
        kernel = KernelConfig(args.lengthscale, args.signal_var, args.noise_std)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(args.n):
            img = make_image_task(Rng(args.seed, i), args.side, kernel)
            write_pgm(out / f"img_{i:04d}.pgm", to_bytes_image(img))
    except OSError as exc:
        raise CliIOError(f"cannot write images to {out}: {exc.strerror}") from None
    print(f"wrote {args.n} images to {out}")
    return EXIT_OK


def cmd_grad_check(args):
    from .gradcheck import TOLERANCE, run_suite

    def report(r):
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<34} rel_err={r.error:.3e} ({r.seconds:.2f}s)")

    results = run_suite(names=args.only, report=report)
    failed = [r for r in results if not r.passed]
    if failed:
        names = ", ".join(r.name for r in failed)
        print(f"error: gradient check failed (tolerance {TOLERANCE:g}): {names}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="panp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write a checkpoint + metrics CSV")
    p.add_argument("--config", help="JSON file of flat dotted keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="checkpoint path (default OUT/checkpoint.panp)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint per context fraction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-tasks", type=int, default=100)
    p.add_argument("--fractions", default="0.1,0.5,1.0")
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--out", help="directory for eval.csv (default: checkpoint directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="complete an image from a fraction of its patches")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", help="8-bit P5 PGM, square, side ≤ 32")
    p.add_argument("--synthetic", action="store_true", help="use a GP image instead of --input")
    p.add_argument("--ctx-fraction", type=float, default=0.25)
    p.add_argument("--out", default="reconstruction")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gen-data", help="write GP-sampled grayscale images as PGM files")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--lengthscale", type=float, default=KernelConfig.lengthscale)
    p.add_argument("--signal-var", type=float, default=KernelConfig.signal_var)
    p.add_argument("--noise-std", type=float, default=KernelConfig.noise_std)
    p.add_argument("--out", default="data")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("grad-check", help="run the gradient-check suite")
    p.add_argument("--only", action="append", metavar="NAME", help="run only the named check(s)")
    p.set_defaults(func=cmd_grad_check)
    return parser


def _configure_logging():
    level = {"debug": logging.DEBUG, "info": logging.INFO, "quiet": logging.WARNING}.get(
        os.environ.get("PANP_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None):
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, GPError) as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CliIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
