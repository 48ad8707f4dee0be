"""Compare the numba and pure-numpy kernels, then time one training step on each backend.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from maformer import kernels

STEP_SNIPPET = """
import time, numpy as np
from maformer.config import ModelConfig
from maformer.model import init_params
from maformer.optim import AdamW
from maformer.train import train_step
cfg = ModelConfig.load({cfg!r})
p = init_params(cfg, 0)
opt = AdamW(p.arrays)
rng = np.random.default_rng(0)
x = rng.standard_normal((32, 3, 32, 32)).astype(np.float32)
y = rng.integers(0, cfg.num_classes, 32)
train_step(p, cfg, x, y, opt, 1e-3, None)
t = time.perf_counter()
for _ in range({n}):
    train_step(p, cfg, x, y, opt, 1e-3, None)
print((time.perf_counter() - t) / {n})
"""


def bench(fn, repeat):
    fn()  # warm-up (and JIT compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32 * 64, 64)).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    gamma, beta = np.ones(64, np.float32), np.zeros(64, np.float32)
    s = rng.standard_normal((32 * 16, 2, 16, 16)).astype(np.float32).reshape(-1, 16)
    idx = rng.integers(0, 512, 4096)
    src = rng.standard_normal((4096, 64))
    _, mean, rstd = kernels.np_layer_norm_fwd(x, gamma, beta, 1e-5)
    y = kernels.np_softmax_fwd(s)
    gs = rng.standard_normal(s.shape).astype(np.float32)
    cases = {
        "layer_norm_fwd": lambda m: getattr(kernels, m + "_layer_norm_fwd")(x, gamma, beta, 1e-5),
        "layer_norm_bwd": lambda m: getattr(kernels, m + "_layer_norm_bwd")(g, x, gamma, mean, rstd),
        "softmax_fwd": lambda m: getattr(kernels, m + "_softmax_fwd")(s),
        "softmax_bwd": lambda m: getattr(kernels, m + "_softmax_bwd")(y, gs),
        "gelu_fwd": lambda m: getattr(kernels, m + "_gelu_fwd")(x),
        "gelu_bwd": lambda m: getattr(kernels, m + "_gelu_bwd")(x, g),
        "scatter_add_rows": lambda m: getattr(kernels, m + "_scatter_add_rows")(np.zeros((512, 64)), idx, src),
    }
    print(f"{'kernel':<18} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for name, f in cases.items():
        a = bench(lambda: f("np"), repeat) * 1e6
        b = bench(lambda: f("nb"), repeat) * 1e6
        print(f"{name:<18} {a:>10.1f} {b:>10.1f} {a / b:>7.2f}x")


def step_time(flag, cfg, n):
    env = {**os.environ, "MAFORMER_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(cfg=cfg, n=n)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    ap.add_argument("--config", default=os.path.join(os.path.dirname(__file__), "..", "configs", "tiny.json"))
    args = ap.parse_args()
    kernel_table(args.repeat)
    a = step_time("0", args.config, args.steps)
    b = step_time("1", args.config, args.steps)
    print(f"\ntrain step (batch 32, {os.path.basename(args.config)}): "
          f"numpy {a * 1e3:.1f} ms, numba {b * 1e3:.1f} ms, speedup {a / b:.2f}x")


if __name__ == "__main__":
    main()
