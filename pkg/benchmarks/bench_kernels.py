"""Compare the numba and numpy backends of the objective kernels.

Usage::

    python benchmarks/bench_kernels.py            # kernel timings
    python benchmarks/bench_kernels.py --solver   # also a full toy calibration per backend

The solver comparison re-runs this script in a child process with
``CPL_DISABLE_NUMBA=1`` so the flag takes effect at import time.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from cpl import kernels
from cpl._accel import HAVE_NUMBA


def _best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_table(sizes=(1_000, 10_000, 100_000), K=10, repeats=5, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        S = np.abs(rng.standard_normal(n))
        off = np.abs(rng.standard_normal(n))
        C = rng.uniform(size=(n, K))
        Sc = C[np.arange(n), rng.integers(0, K, n)]
        h = rng.uniform(0.0, 2.0, n)
        f = rng.uniform(1.0, 5.0, n)
        w = np.full(n, 1.0 / n)
        cases = {
            "regression": lambda nb: kernels.regression_pass(S, off, h, f, w, 0.9, 0.05, numba=nb),
            "classification": lambda nb: kernels.classification_pass(Sc, C, h, f, w, 0.9, 0.05, numba=nb),
        }
        for name, call in cases.items():
            t_np = _best_of(lambda: call(False), repeats)
            row = {"kernel": name, "n": n, "numpy_ms": 1e3 * t_np}
            if HAVE_NUMBA:
                call(True)  # compile outside the timing
                t_nb = _best_of(lambda: call(True), repeats)
                a, b = call(False), call(True)
                row.update(numba_ms=1e3 * t_nb, speedup=t_np / t_nb,
                           max_abs_diff=max(abs(a[0] - b[0]), float(np.max(np.abs(a[2] - b[2])))))
            rows.append(row)
    return rows


def solver_run():
    from cpl.data import ShiftBasis, SolverConfig
    from cpl.hypothesis import linear
    from cpl.scores import AbsResidual, dataset_scores
    from cpl.solver import run_cpl, split_conformal_level
    from cpl.synthetic import ToySpec, gen_toy

    ds = gen_toy(ToySpec(20_000, 7, 0.1))
    fam = AbsResidual()
    q = split_conformal_level(dataset_scores(fam, ds), 0.1)
    cfg = SolverConfig(sigma=0.05, step_h=0.05, step_beta=20.0, max_outer_iters=300, sigma_start=0.5, anneal_frac=0.3)
    t0 = time.perf_counter()
    rule, diag = run_cpl(cfg, ds, ShiftBasis.parse("intercept"), fam, linear(1, q, feature_map=ShiftBasis.parse("ge:0:0")))
    return {"seconds": time.perf_counter() - t0, "backend": rule.provenance["backend"],
            "params": [float(v) for v in rule.hyp.params]}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--solver", action="store_true", help="also time a full calibration per backend")
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        print(json.dumps(solver_run()))
        return

    print(f"numba available: {HAVE_NUMBA}")
    print(f"{'kernel':>15s} {'n':>8s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for r in kernel_table():
        print(f"{r['kernel']:>15s} {r['n']:>8d} {r['numpy_ms']:>10.3f} {r.get('numba_ms', np.nan):>10.3f} "
              f"{r.get('speedup', np.nan):>8.2f} {r.get('max_abs_diff', np.nan):>10.2e}")

    if args.solver:
        results = {}
        for flag in ("0", "1"):
            env = dict(os.environ, CPL_DISABLE_NUMBA=flag)
            out = subprocess.run([sys.executable, __file__, "--child"], env=env, capture_output=True, text=True, check=True)
            res = json.loads(out.stdout.strip().splitlines()[-1])
            results[res["backend"]] = res
            print(f"toy calibration ({res['backend']}): {res['seconds']:.2f} s")
        if len(results) == 2:
            diff = np.max(np.abs(np.subtract(results["numba"]["params"], results["numpy"]["params"])))
            print(f"max parameter difference between backends: {diff:.2e}")


if __name__ == "__main__":
    main()
