"""Compare the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--blocks 6] [--repeat 2000] [--realization]

Each kernel is timed on the same inputs with both backends; the optional
``--realization`` flag also times one short simulated realization in a
subprocess per backend, since end-to-end speed also includes Python overhead
the kernels do not touch.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from resloc._ext import _filterkernel_py, _pbkernel_py

try:
    from resloc._ext import _filterkernel, _pbkernel
except ImportError:  # pragma: no cover
    sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")


def make_inputs(nb: int, seed: int = 1):
    rng = np.random.default_rng(seed)
    n = 5 * nb
    A = rng.normal(size=(n, n))
    cov = A @ A.T / n + 0.1 * np.eye(n)
    mean = rng.normal(size=n) * 3
    mean[4::5] = rng.uniform(-3, 3, nb)
    m = min(nb + 1, 4)
    offsets = np.array([5 * b for b in range(1, m - 1)] + [-1, -1], dtype=np.int64)[:m]
    targets = rng.normal(size=(m, 3)) * 10
    rdiag = np.array([1.0, 0.01, 0.01])
    _, H, _ = _filterkernel_py.measurement_model(mean, cov, offsets, targets, rdiag)
    return {
        "predict_joint": (mean, cov, rng.normal(size=(nb, 3)), rng.uniform(0.1, 1, n), 0.1),
        "measurement_model": (mean, cov, offsets, targets, rdiag),
        "joseph_update": (mean, cov, H, rng.normal(size=3 * m) * 0.1, np.tile(rdiag, m)),
        "spd_inverse": (cov,),
        "pb_quantile": (rng.uniform(0, 0.05, 25), 0.999),
        "window_violations": (rng.random((25, 3)) < 0.05, rng.uniform(0, 0.05, (25, 3)), 0.999),
    }


def backends(name):
    mod_c = _pbkernel if name in ("pb_quantile", "window_violations") else _filterkernel
    mod_p = _pbkernel_py if mod_c is _pbkernel else _filterkernel_py
    return getattr(mod_c, name), getattr(mod_p, name)


def time_call(fn, args, repeat):
    best = min(timeit.repeat(lambda: fn(*args), number=repeat, repeat=3))
    return best / repeat * 1e6


def time_realization(pure: bool, steps: int) -> float:
    code = (
        "import time; from resloc import sim; from resloc.scenario import default_scenario;"
        f"cfg = default_scenario().with_overrides(steps={steps});"
        "t = time.perf_counter(); sim.run_realization(cfg, 0); print(time.perf_counter() - t)"
    )
    env = dict(os.environ)
    env.pop("RESLOC_PURE_PYTHON", None)
    if pure:
        env["RESLOC_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--blocks", type=int, default=6, help="pose blocks in the joint state")
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--realization", action="store_true")
    ap.add_argument("--steps", type=int, default=100)
    args = ap.parse_args(argv)

    inputs = make_inputs(args.blocks)
    print(f"joint state dimension {5 * args.blocks}")
    print(f"{'kernel':<20}{'compiled us':>14}{'python us':>14}{'speedup':>10}")
    for name, a in inputs.items():
        fc, fp = backends(name)
        tc = time_call(fc, a, args.repeat)
        tp = time_call(fp, a, args.repeat)
        print(f"{name:<20}{tc:>14.1f}{tp:>14.1f}{tp / tc:>9.1f}x")
    if args.realization:
        tc = time_realization(False, args.steps)
        tp = time_realization(True, args.steps)
        print(f"{'realization':<20}{tc * 1e6:>14.0f}{tp * 1e6:>14.0f}{tp / tc:>9.1f}x  ({args.steps} steps)")


if __name__ == "__main__":
    main()
