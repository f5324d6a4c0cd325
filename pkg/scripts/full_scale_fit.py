"""Full-scale synthetic fit: simulate a large fleet and recover parameters.

Reproduces the large-sample recovery run (default N=3000, T=100) that the
opt-in slow test asserts. Prints per-component deviations from the
generating values and writes an optional JSON report.

Usage:
    python3 scripts/full_scale_fit.py --out /tmp/full_fit.json
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from spe import (
    EngineFamily,
    EstimatorConfig,
    SimConfig,
    estimate,
    fit_mdp_baseline,
    reference_params,
    simulate,
)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=3000)
    ap.add_argument("--t", type=int, default=100)
    ap.add_argument("--seed", type=int, default=4)
    ap.add_argument("--grad-tol", type=float, default=1e-6)
    ap.add_argument("--max-iters", type=int, default=2000)
    ap.add_argument("--baseline", action="store_true", help="also fit the observable-state baseline")
    ap.add_argument("--out", help="JSON report path")
    args = ap.parse_args()

    family = EngineFamily()
    truth1, truth2 = family.params_to_theta(reference_params())

    t0 = time.time()
    fleet = simulate(reference_params(), SimConfig(args.n, args.t, seed=args.seed)).histories
    print(f"simulated {args.n} x {args.t} in {time.time() - t0:.0f}s")

    config = EstimatorConfig(grad_norm_tol=args.grad_tol, max_stage2_iters=args.max_iters)
    t0 = time.time()
    report = estimate(fleet, family, config)
    print(f"estimated in {time.time() - t0:.0f}s "
          f"(stage1 converged={report.stage1.converged}, stage2 converged={report.stage2.converged})")

    dev2 = np.abs(report.stage1.theta2 - truth2)
    dev1 = np.abs(report.stage2.theta1 - truth1) * np.array([1.0, 1.0, 0.1])
    print(f"theta1 {np.round(report.stage2.theta1, 4)}  scaled dev {np.round(dev1, 4)}")
    print(f"dynamics max dev {dev2.max():.5f}")
    print(f"loglik {report.loglik.total:.2f}")

    payload = {
        "n": args.n, "t": args.t, "seed": args.seed,
        "report": report.to_dict(),
        "dev_theta1_scaled": dev1.tolist(),
        "dev_theta2_max": float(dev2.max()),
    }
    if args.baseline:
        t0 = time.time()
        base = fit_mdp_baseline(fleet, config)
        gap = (report.loglik.total - base.loglik.total) / abs(report.loglik.total)
        print(f"baseline in {time.time() - t0:.0f}s: loglik {base.loglik.total:.2f} "
              f"(gap {100 * gap:.2f}%)")
        payload["baseline_loglik"] = base.loglik.total
        payload["baseline_gap"] = gap
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
