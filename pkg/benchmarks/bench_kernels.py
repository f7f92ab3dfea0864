"""Compiled vs numpy dynamics kernels: agreement and throughput.

    python3 benchmarks/bench_kernels.py [--batch 1 64 1024] [--repeat 20]
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from conftest import make_biped, make_quad, random_state  # noqa: E402

from lljump import kernels  # noqa: E402


def sample(model, batch, rng):
    X = np.array([random_state(rng).as_vector() for _ in range(batch)])
    F = rng.normal(size=(batch, model.n_contacts, 3)) * 50
    P = X[:, None, :3] + np.array([lg.attach_offset for lg in model.legs]) + [0, 0, -0.45]
    return X, F, P


def timed(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, nargs="+", default=[1, 64, 1024], help="batch sizes to time")
    ap.add_argument("--repeat", type=int, default=20, help="timing repetitions (best is reported)")
    args = ap.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled kernels not built; only the numpy backend is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'model':6} {'batch':>6} {'numpy us':>10} {'cython us':>10} {'speedup':>8} {'max |diff|':>11}")
    for model in (make_quad(), make_biped()):
        params = model.params
        for b in args.batch:
            X, F, P = sample(model, b, rng)
            out = {}
            times = {}
            for backend in ("numpy", "cython"):
                kernels.use_backend(backend)
                out[backend] = kernels.rk4_batch(X, F, P, 2.5e-3, params)
                times[backend] = timed(lambda: kernels.rk4_batch(X, F, P, 2.5e-3, params), args.repeat)
            kernels.use_backend("cython")
            diff = np.abs(out["numpy"] - out["cython"]).max()
            print(f"{model.name:6} {b:6d} {times['numpy'] * 1e6:10.1f} {times['cython'] * 1e6:10.1f} "
                  f"{times['numpy'] / times['cython']:8.1f} {diff:11.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
