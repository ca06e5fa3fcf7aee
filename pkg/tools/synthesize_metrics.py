"""Regenerate the shipped quadratic-in-alpha metrics.

Needs the ``synthesis`` extra (cvxpy). Prints config-ready coefficient rows
for both pitch scenarios and their verification margins.
"""
import numpy as np

from safe_adapt.metrics import box_vertices, pitch_grid, synthesize_quadratic_metric, verify_ccm
from safe_adapt.sysmodel import pitch_system

DEG = np.pi / 180
RATE = 0.5
VERTICES = box_vertices([0.1, -3.0], [0.8, 1.0])

SCENARIOS = {
    # C1 cannot hold at alpha = 45 deg (dL/dalpha = 0 there), so the
    # immelmann grid uses 8 alpha nodes: denser grids still certify but the
    # metric condition number grows by orders of magnitude. The metric is
    # also kept positive definite over a wider alpha range so curves leaving
    # the grid still have a valid energy.
    "immelmann": dict(alpha=(-5, 50), q=(-10, 50), points=(8, 25), pd_alpha=(-60, 90)),
    "sine_tracking": dict(alpha=(-60, 60), q=(-20, 20), points=(25, 25), pd_alpha=None),
}


def main():
    sys = pitch_system()
    for name, cfg in SCENARIOS.items():
        grid = pitch_grid(cfg["alpha"], cfg["q"], *cfg["points"])
        pd_grid = None
        if cfg["pd_alpha"] is not None:
            pd_grid = [np.array([0.0, a * DEG, 0.0]) for a in np.linspace(*cfg["pd_alpha"], 61)]
        metric = synthesize_quadratic_metric(sys, grid, RATE, theta_vertices=VERTICES, pd_grid=pd_grid)
        report = verify_ccm(metric, sys, grid, VERTICES)
        eigs = np.concatenate([np.linalg.eigvalsh(W) for W in metric.W_batch(grid, None)])
        print(f"[{name}] c1={report.c1_worst_eig:.3e} c2={report.c2_worst_residual:.1e} "
              f"W eig range [{eigs.min():.3g}, {eigs.max():.3g}]")
        for j, row in enumerate(metric.to_rows()):
            print(f"W{j} = {row}")
        print("# shipped configs may divide these rows by [metric] scale")


if __name__ == "__main__":
    main()
