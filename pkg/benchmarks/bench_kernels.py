"""Compiled vs numpy kernels, at the shapes one training iteration uses.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--no-train]

Prints per-kernel median wall time for both backends and the speedup, then the
time of a few full DSWM training iterations under each backend (run in a
subprocess so the import-time backend switch takes effect).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dswm import kernels

T, B, H, S, Z, HID = 50, 3, 256, 49, 128, 256


def _cases(rng):
    M = T * B
    x = rng.normal(size=(M, HID))
    sig = 1.0 / (1.0 + np.exp(-x))
    gi, gh, h = rng.normal(size=(B, 3 * H)), rng.normal(size=(B, 3 * H)), rng.normal(size=(B, H))
    logits = rng.normal(size=(M, Z))
    keys = rng.random((B, T, S))
    values = rng.random((B, T, Z))
    queries = rng.random((M, S))
    qb = np.tile(np.arange(B), T).astype(np.int64)
    qn = np.repeat(np.arange(1, T + 1), B).astype(np.int64)
    return {
        "swish_fwd": lambda k: k.swish_fwd(x),
        "swish_bwd": lambda k: k.swish_bwd(x, x, sig),
        "gru_fwd": lambda k: k.gru_fwd(gi, gh, h),
        "softmax_groups": lambda k: k.softmax_groups(logits, 8),
        "dnd_read_fwd": lambda k: k.dnd_read_fwd(queries, keys, values, qb, qn, 5, 0.1),
        "dnd_read_bwd": _bwd_case(queries, keys, values, qb, qn, rng),
    }


def _bwd_case(queries, keys, values, qb, qn, rng):
    _, sel, w, c, qnorm, knorm = kernels.python_backend.dnd_read_fwd(queries, keys, values, qb, qn, 5, 0.1)
    g = rng.normal(size=(len(queries), values.shape[2]))
    return lambda k: k.dnd_read_bwd(g, queries, keys, values, qb, sel, w, c, qnorm, knorm, 0.1)


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    backends = [("python", kernels.python_backend)]
    if kernels.cython_backend is not None:
        backends.append(("cython", kernels.cython_backend))
    else:
        print("compiled extension not built; only the numpy backend is timed")
    print(f"{'kernel':<16}" + "".join(f"{n + ' ms':>12}" for n, _ in backends) + ("    speedup" if len(backends) > 1 else ""))
    for name, fn in _cases(rng).items():
        times = [np.median(timeit.repeat(lambda: fn(k), number=1, repeat=repeat)) * 1e3 for _, k in backends]
        row = f"{name:<16}" + "".join(f"{t:12.3f}" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:10.1f}x"
        print(row)


_TRAIN = """
import time
from dswm import kernels
from dswm.gridworld import build_topology, collect_dataset, generate_pattern_map
from dswm.models import ModelConfig, TrainConfig, train_dswm
topo = build_topology("Open")
pool = [generate_pattern_map(topo, i, i) for i in range(5)]
ds = collect_dataset(topo, pool, 30, 50, seed=0)
train_dswm(ds, ModelConfig(), TrainConfig(iterations=1), seed=0)
t = time.perf_counter()
train_dswm(ds, ModelConfig(), TrainConfig(iterations={n}), seed=0)
print(kernels.BACKEND, (time.perf_counter() - t) / {n})
"""


def bench_training(n=5):
    print(f"\nDSWM training iteration (batch {B} x {T} steps, default sizes), mean of {n}")
    for choice in ("python", "auto"):
        env = dict(os.environ, DSWM_KERNELS=choice)
        out = subprocess.run([sys.executable, "-c", _TRAIN.format(n=n)], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"  {out[0]:<8} {float(out[1]) * 1e3:9.1f} ms/iteration")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-train", action="store_true", help="skip the end-to-end training timing")
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if not args.no_train:
        bench_training()


if __name__ == "__main__":
    main()
