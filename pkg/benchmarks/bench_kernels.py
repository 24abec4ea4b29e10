"""Time the numba and numpy paths of the hot kernels, plus one end-to-end run.

    python benchmarks/bench_kernels.py [--repeat 5]

The end-to-end row generates and simulates the 32-layer workload once per
path; the numpy path is selected by re-running in a subprocess with
VDCORE_NO_NUMBA=1, since the switch is read at import time.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from vdcore import _kernels as k


def masks(n, seed=0):
    rng = np.random.default_rng(seed)
    return [(int(m), int(s)) for m, s in zip(rng.integers(0, 1 << 32, n), rng.integers(1, 7, n))]


def periodic(period=12, reps=64, seed=0):
    rng = np.random.default_rng(seed)
    sig = np.tile(rng.integers(0, 9, period), reps).astype(np.int64)
    off = (np.tile(rng.integers(0, 50, period), reps)
           + np.repeat(np.arange(reps), period) * 3).astype(np.int64)
    zeros = np.zeros_like(sig)
    return sig, off, zeros, zeros


def chain_dag(n=1500, fan=3, seed=0):
    rng = np.random.default_rng(seed)
    indptr, indices = [0], []
    for i in range(n):
        succ = sorted({int(j) for j in rng.integers(i + 1, n, fan)} if i < n - 1 else set())
        indices += succ
        indptr.append(len(indices))
    return np.array(indptr, dtype=np.int64), np.array(indices, dtype=np.int64), n


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(repeat):
    ms = masks(20_000)
    sig, off, dep, tag = periodic()
    dag = chain_dag()
    if k._HAVE_NUMBA:   # compile outside the timed region
        k._first_fit_jit(np.int64(0), 1, 32)
        k._repeat_count_jit(sig, off, dep, tag, 0, 12)
        k._reach_closure_jit(*dag)
    cases = {
        "first_fit x20000": (
            lambda: [k._first_fit_jit(np.int64(m), s, 32) for m, s in ms],
            lambda: [k.first_fit_numpy(m, s, 32) for m, s in ms]),
        "repeat_count x200": (
            lambda: [k._repeat_count_jit(sig, off, dep, tag, 0, 12) for _ in range(200)],
            lambda: [k.repeat_count_numpy(sig, off, dep, tag, 0, 12) for _ in range(200)]),
        "reach_closure n=1500": (
            lambda: k._reach_closure_jit(*dag),
            lambda: k.reach_closure_numpy(*dag)),
    }
    for name, (jit, ref) in cases.items():
        t_ref = best(ref, repeat)
        t_jit = best(jit, repeat) if k._HAVE_NUMBA else float("nan")
        yield name, t_jit, t_ref


END_TO_END = """
import time
from vdcore.cli import read_workload, resolve_profile
from vdcore.generator import generate
from vdcore.machine import run
from vdcore.workload import init_inputs
g = read_workload("layers32")
hw = resolve_profile("h100-4pair")
generate(g, hw)   # warm caches and JIT
t = time.perf_counter()
run(generate(g, hw), init_inputs(g, 0))
print(time.perf_counter() - t)
"""


def end_to_end(no_numba: bool) -> float:
    env = dict(os.environ, VDCORE_NO_NUMBA="1" if no_numba else "0")
    out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args(argv)

    print(f"{'kernel':<24}{'numba s':>10}{'numpy s':>10}{'speedup':>9}")
    for name, t_jit, t_ref in kernel_rows(args.repeat):
        print(f"{name:<24}{t_jit:>10.4f}{t_ref:>10.4f}{t_ref / t_jit:>8.1f}x")
    if not args.skip_end_to_end:
        t0 = time.perf_counter()
        t_jit, t_ref = end_to_end(False), end_to_end(True)
        print(f"{'layers32 end-to-end':<24}{t_jit:>10.4f}{t_ref:>10.4f}{t_ref / t_jit:>8.1f}x")
        print(f"(wall {time.perf_counter() - t0:.1f}s)")


if __name__ == "__main__":
    main()
