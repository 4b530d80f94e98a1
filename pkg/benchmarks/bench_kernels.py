"""Compiled vs numpy kernels: per-kernel timings and one end-to-end training step.

    python benchmarks/bench_kernels.py [--repeat N]

The end-to-end comparison runs each backend in a fresh interpreter with
``PANP_KERNELS`` set, because the backend is bound at import time.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from panp.kernels import available_backends, load_backend


def kernel_cases(rng):
    # shapes match the default model: 16 tokens, d_model 64, 4 heads, hidden 128
    x = rng.standard_normal((16, 64))
    h = rng.standard_normal((16, 128))
    g, b = rng.standard_normal(64), rng.standard_normal(64)
    q, k, v = (rng.standard_normal((16, 64)) for _ in range(3))
    gout = rng.standard_normal((16, 64))
    scores = rng.standard_normal((64, 16))

    def cases(K):
        sm = K.softmax_forward(scores)
        _, xhat, rstd = K.layer_norm_forward(x, g, b, 1e-5)
        _, w = K.attention_forward(q, k, v, 4)
        return {
            "softmax fwd": lambda: K.softmax_forward(scores),
            "softmax bwd": lambda: K.softmax_backward(sm, scores),
            "gelu fwd": lambda: K.gelu_forward(h),
            "gelu bwd": lambda: K.gelu_backward(h, h),
            "softplus fwd": lambda: K.softplus_forward(h),
            "layer_norm fwd": lambda: K.layer_norm_forward(x, g, b, 1e-5),
            "layer_norm bwd": lambda: K.layer_norm_backward(gout, xhat, rstd, g),
            "attention fwd": lambda: K.attention_forward(q, k, v, 4),
            "attention bwd": lambda: K.attention_backward(q, k, v, w, gout, 4),
        }

    return cases


def time_call(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


_STEP_SNIPPET = """
import json, time
from panp import kernels
from panp.model import ModelConfig
from panp.tasks import TaskConfig
from panp.training import TrainConfig, train
cfg, task = ModelConfig(), TaskConfig()
train(cfg, TrainConfig(steps=2, batch_size=8), task)  # warm-up
t0 = time.perf_counter()
train(cfg, TrainConfig(steps={steps}, batch_size=8), task)
print(json.dumps({{"backend": kernels.BACKEND, "seconds": (time.perf_counter() - t0) / {steps}}}))
"""


def time_training_step(backend, steps):
    env = dict(os.environ, PANP_KERNELS=backend, PANP_LOG="quiet")
    out = subprocess.run(
        [sys.executable, "-c", _STEP_SNIPPET.format(steps=steps)],
        env=env,
        check=True,
        capture_output=True,
        text=True,
    )
    result = json.loads(out.stdout.strip().splitlines()[-1])
    if result["backend"] != backend:
        raise RuntimeError(f"asked for {backend}, subprocess used {result['backend']}")
    return result["seconds"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=20, help="training steps timed per backend")
    args = ap.parse_args(argv)

    backends = available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    cases = kernel_cases(np.random.default_rng(0))
    timings = {name: cases(load_backend(name)) for name in backends}

    print(f"{'kernel':<16}" + "".join(f"{n + ' (us)':>16}" for n in backends) + f"{'speedup':>10}")
    for kname in timings[backends[0]]:
        row = [time_call(timings[b][kname], args.repeat) * 1e6 for b in backends]
        speed = f"{row[-1] / row[0]:>9.1f}x" if len(row) == 2 else ""
        print(f"{kname:<16}" + "".join(f"{t:>16.2f}" for t in row) + speed)

    print(f"\ntraining step (batch 8, default PANP), mean of {args.steps} steps")
    step = {b: time_training_step(b, args.steps) for b in backends}
    for b in backends:
        print(f"  {b:<10} {step[b] * 1e3:8.2f} ms/step")
    if len(step) == 2:
        print(f"  speedup    {step['python'] / step['compiled']:8.2f}x")


if __name__ == "__main__":
    main()
