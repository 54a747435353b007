"""Compare the compiled (numba) and plain numpy fitting kernels.

Usage::

    python benchmarks/bench_kernels.py            # both back ends, side by side
    python benchmarks/bench_kernels.py --single   # current back end only

The back end is chosen by ``TRIAL_ADJUST_JIT`` when ``trial_adjust`` is first
imported, so each one runs in its own interpreter.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

CASES = [
    # (label, n, covariates)
    ("exp-1 size", 60, 10),
    ("exp-2 arm", 100, 25),
    ("n=1000", 1000, 10),
]


def _data(n, q, seed=0):
    rng = np.random.default_rng(seed)
    x = np.hstack([np.ones((n, 1)), rng.integers(0, 2, (n, 1)), rng.normal(size=(n, q))])
    eta = -0.5 + x[:, 1] + x[:, 2:] @ np.full(q, 0.3)
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    return x, y


def run_single(repeat):
    from trial_adjust import _kernels

    out = {"backend": "numba" if _kernels.USE_NUMBA else "numpy", "cases": []}
    for label, n, q in CASES:
        x, y = _data(n, q)
        beta0 = np.zeros(x.shape[1])
        row = {"case": label}
        for firth in (False, True):
            # warm-up also triggers compilation
            beta, it, status = _kernels.newton(x, y, _kernels.LOGIT, firth, beta0, 1e-6, 500)
            t = min(timeit.repeat(
                lambda: _kernels.newton(x, y, _kernels.LOGIT, firth, beta0, 1e-6, 500),
                number=repeat, repeat=3)) / repeat
            key = "firth" if firth else "mle"
            row[f"{key}_us"] = 1e6 * t
            row[f"{key}_beta"] = beta.tolist()
        out["cases"].append(row)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--single", action="store_true")
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if args.single:
        print(json.dumps(run_single(args.repeat)))
        return

    results = {}
    for flag in ("1", "0"):
        env = dict(os.environ, TRIAL_ADJUST_JIT=flag)
        proc = subprocess.run(
            [sys.executable, __file__, "--single", "--repeat", str(args.repeat)],
            env=env, capture_output=True, text=True, check=True,
        )
        res = json.loads(proc.stdout.strip().splitlines()[-1])
        results[res["backend"]] = res

    print(f"{'case':<12} {'method':<6} {'numba us':>10} {'numpy us':>10} {'speed-up':>9} {'max |dbeta|':>12}")
    for cn, cp in zip(results["numba"]["cases"], results["numpy"]["cases"]):
        for key in ("mle", "firth"):
            tn, tp = cn[f"{key}_us"], cp[f"{key}_us"]
            diff = np.max(np.abs(np.array(cn[f"{key}_beta"]) - np.array(cp[f"{key}_beta"])))
            print(f"{cn['case']:<12} {key:<6} {tn:>10.1f} {tp:>10.1f} {tp / tn:>8.1f}x {diff:>12.2e}")


if __name__ == "__main__":
    main()
