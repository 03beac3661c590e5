"""Wall-clock comparison of the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeats 3] [--quick]

Each case runs once untimed on each backend (numba compiles there), then the
best of ``--repeats`` timed runs is reported along with the speedup.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from copylab import construction, gssm, kernels, tasks
from copylab.numerics import make_rng


def cases(quick: bool):
    rng = make_rng(0)
    v = tasks.Vocab(26)
    L = 100 if quick else 300
    X = tasks.uniform_strings(v, L, 1024 if quick else 10240, rng)
    copier = construction.build_copier(26, 5, L)
    Xc = tasks.uniform_strings(v, L, 64 if quick else 256, rng)
    spec = gssm.random_spec(16, 4, 2, rng)
    a = rng.uniform(0.5, 1.0, (32, 256 if quick else 1024, 64))
    b = rng.normal(size=a.shape)
    Lg = 12 if quick else 16
    v2 = tasks.Vocab(2)
    return [
        ("repeated_windows", lambda: kernels.repeated_windows(X, 6, 26)),
        ("hash_copy", lambda: kernels.hash_copy(X, 6, 26)),
        ("count_repeats_all D=2", lambda: kernels.count_repeats_all(2, Lg, 3)),
        ("gssm_copy_correct", lambda: kernels.gssm_copy_correct(spec.update, spec.readout, spec.s0, 2, Lg, v2.bos, v2.copy)),
        ("diag_scan", lambda: kernels.diag_scan(a, b)),
        ("copier_generate", lambda: construction.generate_copy_batch(copier, Xc)),
    ]


def best_of(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="small inputs, for smoke runs")
    args = ap.parse_args(argv)
    if not kernels.HAS_NUMBA:
        print("numba is not importable; nothing to compare")
        return 1
    print(f"{'kernel':<24}{'numba s':>10}{'numpy s':>10}{'speedup':>9}")
    for name, fn in cases(args.quick):
        res = {}
        for be in ("numba", "numpy"):
            prev = kernels.set_backend(be)
            try:
                res[be] = best_of(fn, args.repeats)
            finally:
                kernels.set_backend(prev)
        print(f"{name:<24}{res['numba']:>10.4f}{res['numpy']:>10.4f}{res['numpy'] / res['numba']:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
