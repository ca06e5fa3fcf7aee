"""Measure the rate-estimate error on the shipped set-membership runs.

The residual |xdot_est - f(x) + Delta(x)' theta* - B(x) u_avg| uses the
central difference and the averaged held input exactly as the controller
does, so its maximum is the error the bound D + rate_error must cover.
"""
import sys

import numpy as np

from safe_adapt.bench.config import load_config
from safe_adapt.bench.scenarios import run, shipped_config
from safe_adapt.smid import estimate_rate
from safe_adapt.sysmodel import pitch_system


def max_residual(name):
    cfg = load_config(shipped_config(name))
    trace, _ = run(cfg)
    plant = pitch_system()
    theta = np.asarray(cfg.theta_true)
    worst = 0.0
    for k in range(1, len(trace.t) - 1):
        x = trace.x[k]
        u = 0.5 * (trace.u[k - 1] + trace.u[k])
        resid = estimate_rate(trace, k) - plant.f(x) + plant.delta(x).T @ theta - plant.B(x) @ u
        worst = max(worst, np.abs(resid).max())
    return worst


def main(names):
    for name in names or ["immelmann_racbf_smid", "sine_tracking_racbf_smid"]:
        print(f"{name}: max rate residual {max_residual(name):.3e}")


if __name__ == "__main__":
    main(sys.argv[1:])
