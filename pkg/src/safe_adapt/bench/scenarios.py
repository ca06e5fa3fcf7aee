"""Scenario registry, closed-loop runs and summary metrics."""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from ..barriers import admissible_gain_floor, pitch_rate_band, pitch_rate_ceiling, state_floor
from ..metrics import CcmReport, PolynomialMetric, box_vertices, pitch_grid, verify_ccm
from ..safeloop import ControllerState, SmidSettings, step_acbf_baseline, step_racbf
from ..smid import MeasurementBuffer, ParameterBox, max_error_vector
from ..sysmodel import SimTrace, integrate, make_desired_motion, pitch_system, scalar_drift_system
from .config import ConfigError, ScenarioConfig, load_config

log = logging.getLogger(__name__)

DEG = np.pi / 180.0
HYSTERESIS = 0.05


@dataclass(frozen=True)
class Scenario:
    name: str
    system: object
    state_names: tuple
    make_barrier: object  # (cfg, kind) -> BarrierSpec
    default_sigma: object  # cfg -> float
    q_index: Optional[int] = None


SCENARIO_REGISTRY = {
    "immelmann": Scenario(
        "immelmann", pitch_system(), ("theta_pitch", "alpha", "q"),
        lambda cfg, kind: pitch_rate_ceiling(cfg.q_max_deg * DEG, cfg.class_k_slope, kind),
        lambda cfg: 0.1 * cfg.q_max_deg * DEG, q_index=2),
    "sine_tracking": Scenario(
        "sine_tracking", pitch_system(), ("theta_pitch", "alpha", "q"),
        lambda cfg, kind: pitch_rate_band(cfg.q_max_deg * DEG, cfg.class_k_slope, kind),
        lambda cfg: 0.1, q_index=2),
    "example1": Scenario(
        "example1", scalar_drift_system(), ("x",),
        lambda cfg, kind: state_floor(0.0, cfg.class_k_slope, kind),
        lambda cfg: 0.1),
}


@dataclass
class SummaryMetrics:
    scenario: str
    method: str
    utilization: float
    safety_margin_min: float
    tightened_margin_min: float
    chatter_switches: int
    bound_reduction: np.ndarray
    energy_final: float
    timings_ms: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    source: str = ""

    def row(self) -> dict:
        """Deterministic fields for tables."""
        out = {"scenario": self.scenario, "method": self.method, "utilization": self.utilization,
               "safety_margin_min": self.safety_margin_min, "tightened_margin_min": self.tightened_margin_min,
               "chatter_switches": self.chatter_switches, "energy_final": self.energy_final}
        for i, r in enumerate(self.bound_reduction, 1):
            out[f"bound_reduction_{i}"] = float(r)
        return out


def shipped_config_dir() -> Path:
    return Path(str(resources.files("safe_adapt") / "configs"))


def shipped_config(name: str) -> Path:
    path = shipped_config_dir() / (name if name.endswith(".ini") else name + ".ini")
    if not path.is_file():
        raise ConfigError(f"no shipped config named {name!r}", path)
    return path


def build_metric(cfg: ScenarioConfig) -> Optional[PolynomialMetric]:
    if cfg.metric is None:
        return None
    m = PolynomialMetric.from_rows(cfg.metric.rows, coord=cfg.metric.coordinate, lam=cfg.metric.rate)
    if cfg.metric.scale != 1.0:
        m = PolynomialMetric([C / cfg.metric.scale for C in m.coeffs], coord=m.single_coordinate, lam=m.lam)
    return m


def metric_grid(cfg: ScenarioConfig):
    m = cfg.metric
    return pitch_grid(m.grid_alpha_deg, m.grid_q_deg, *m.grid_points)


def chatter_switches(u, hysteresis: float = HYSTERESIS) -> int:
    """Sign reversals of the input increments larger than ``hysteresis * max|u|``."""
    u = np.asarray(u, dtype=float)
    if u.ndim > 1:
        return int(sum(chatter_switches(u[:, j], hysteresis) for j in range(u.shape[1])))
    du = np.diff(u)
    band = hysteresis * np.abs(u).max() if u.size else 0.0
    signs = np.sign(du[np.abs(du) > band])
    return int(np.count_nonzero(signs[1:] != signs[:-1]))


def initial_state(cfg: ScenarioConfig, scenario: Scenario, metric) -> ControllerState:
    box = ParameterBox(cfg.theta_lower, cfg.theta_upper)
    p = box.lower.size
    theta0 = box.center if cfg.theta_hat0 is None else cfg.theta_hat0
    if not box.contains(theta0):
        raise ConfigError("initial estimate outside the parameter box", cfg.source)
    smid = None
    if cfg.method == "racbf_smid":
        smid = SmidSettings(MeasurementBuffer(cfg.window, cfg.disturbance_bound, cfg.rate_error_bound),
                            stride=cfg.stride)
    geo = dict(cfg.geodesic)
    if geo.pop("confine", False):
        if cfg.metric is None or scenario.q_index is None:
            raise ConfigError("geodesic confinement needs a pitch scenario with a [metric] grid", cfg.source)
        # keep the curves inside the (alpha, q) box where the metric was certified
        geo["region"] = {1: tuple(np.asarray(cfg.metric.grid_alpha_deg) * DEG),
                         2: tuple(np.asarray(cfg.metric.grid_q_deg) * DEG)}
    return ControllerState(
        theta_hat_C=theta0, theta_hat_B=theta0, param_box=box, vartheta=max_error_vector(box),
        gamma_C=cfg.gamma_C * np.eye(p), gamma_B=cfg.gamma_B * np.eye(p),
        lam=metric.lam if metric is not None else 0.0, slack_weight=cfg.slack_weight, smid=smid,
        sigma=cfg.sigma if cfg.sigma is not None else scenario.default_sigma(cfg), geodesic_opts=geo)


def run(cfg: ScenarioConfig, csv_path=None, figures: bool = True):
    """Closed-loop simulation; returns ``(SimTrace, SummaryMetrics)``."""
    from .report import write_trace_csv, write_trace_figure

    scenario = SCENARIO_REGISTRY[cfg.scenario]
    sys = scenario.system
    if cfg.x0.size != sys.dim_x:
        raise ConfigError(f"x0 needs {sys.dim_x} entries", cfg.source)
    if cfg.theta_true.size != sys.dim_theta:
        raise ConfigError(f"theta_true needs {sys.dim_theta} entries", cfg.source)
    metric = build_metric(cfg)
    motion = make_desired_motion(cfg.scenario)
    kind = "modified_adaptive" if cfg.method == "modified_acbf" else "robust_adaptive"
    barrier = scenario.make_barrier(cfg, kind)
    state = initial_state(cfg, scenario, metric)
    if cfg.method != "modified_acbf":
        floor = admissible_gain_floor(state.vartheta, float(barrier.h(cfg.x0, state.theta_hat_B)))
        if cfg.gamma_B < floor:
            raise ConfigError(f"gamma_B={cfg.gamma_B} below the admissible floor {floor:.4g}", cfg.source)

    holder = {"state": state}

    def controller(t, x):
        st = holder["state"]
        if cfg.method == "modified_acbf":
            out, new = step_acbf_baseline(st, sys, barrier, motion, x, t, cfg.dt, "modified", metric)
        else:
            out, new = step_racbf(st, sys, metric, barrier, motion, x, t, cfg.dt)
        # the trace reports the estimates and box used for this step's input
        info = {"eps": out.eps, "h_r": out.h_r, "E": out.energy, "theta_B": st.theta_hat_B,
                "theta_C": st.theta_hat_C, "box_lo": st.param_box.lower, "box_hi": st.param_box.upper,
                "margin": st.tightening.margin() if cfg.method != "modified_acbf" else 0.0,
                "safety_active": float(out.safety_active),
                "t_nlp": out.timings.get("nlp", 0.0), "t_qp": out.timings.get("qp", 0.0),
                "t_lp": out.timings.get("lp", 0.0)}
        holder["state"] = new
        return out.u, info

    tic = time.perf_counter()
    trace = integrate(sys, controller, cfg.x0, cfg.theta_true, cfg.horizon, cfg.dt)
    wall = time.perf_counter() - tic
    trace.extras["state_names"] = scenario.state_names
    summary = summarize(cfg, scenario, trace, wall)
    if csv_path is not None:
        write_trace_csv(trace, csv_path)
        if figures:
            write_trace_figure(trace, cfg, Path(csv_path).with_suffix(".png"))
    return trace, summary


def summarize(cfg: ScenarioConfig, scenario: Scenario, trace: SimTrace, wall: float) -> SummaryMetrics:
    ex = trace.extras
    if scenario.q_index is not None:
        util = float(trace.x[:, scenario.q_index].max() / (cfg.q_max_deg * DEG))
    else:
        util = float("nan")
    v0 = cfg.theta_upper - cfg.theta_lower
    vf = ex["box_hi"][-1] - ex["box_lo"][-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        reduction = np.where(v0 > 0, (v0 - vf) / v0, 0.0)
    timings = {}
    for key in ("nlp", "qp", "lp"):
        arr = ex[f"t_{key}"] * 1e3
        timings[f"{key}_mean"] = float(arr.mean())
        timings[f"{key}_max"] = float(arr.max())
    return SummaryMetrics(
        scenario=cfg.scenario, method=cfg.method, utilization=util,
        safety_margin_min=float(ex["h_r"].min()),
        tightened_margin_min=float((ex["h_r"] - ex["margin"]).min()),
        chatter_switches=chatter_switches(trace.u), bound_reduction=reduction,
        energy_final=float(ex["E"][-1]), timings_ms=timings, wall_clock_s=wall,
        source=Path(cfg.source).name if cfg.source else "")


def compare(configs, out_path=None, figures: bool = True, workers: Optional[int] = None):
    """Run several configs; returns the list of summaries (one per config, in order).

    ``configs`` are paths or ScenarioConfig objects. ``workers`` defaults to
    SAFE_ADAPT_THREADS (1 when unset).
    """
    from .report import write_comparison_figure, write_summary_table

    configs = list(configs)
    if not configs:
        raise ValueError("compare needs at least one config")
    cfgs = [c if isinstance(c, ScenarioConfig) else load_config(c) for c in configs]
    if workers is None:
        workers = max(1, int(os.environ.get("SAFE_ADAPT_THREADS", "1")))
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run, cfg, None, False) for cfg in cfgs]
            for cfg, fut in zip(cfgs, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    results.append(exc)
    else:
        for cfg in cfgs:
            try:
                results.append(run(cfg, None, False))
            except Exception as exc:  # noqa: BLE001 - reported per row
                results.append(exc)
    failed = [(cfg, r) for cfg, r in zip(cfgs, results) if isinstance(r, Exception)]
    ok = [(cfg, r) for cfg, r in zip(cfgs, results) if not isinstance(r, Exception)]
    summaries = [r[1] for _, r in ok]
    if out_path is not None:
        write_summary_table(summaries, out_path, failed=[(cfg, str(exc)) for cfg, exc in failed])
        if figures and ok:
            write_comparison_figure([(cfg, r[0]) for cfg, r in ok], Path(out_path).with_suffix(".png"))
    if failed:
        cfg, exc = failed[0]
        raise RunAborted(f"{cfg.source or cfg.scenario}: {exc}", summaries, failed)
    return summaries


class RunAborted(RuntimeError):
    """A batch run failed; ``partial`` holds the summaries that finished."""

    def __init__(self, message, partial, failed):
        super().__init__(message)
        self.partial = partial
        self.failed = failed


def verify_metric_cmd(cfg: ScenarioConfig) -> CcmReport:
    if cfg.metric is None:
        raise ConfigError("config has no [metric] coefficients", cfg.source)
    if SCENARIO_REGISTRY[cfg.scenario].q_index is None:
        raise ConfigError("metric verification is defined for the pitch scenarios", cfg.source)
    metric = build_metric(cfg)
    sys = SCENARIO_REGISTRY[cfg.scenario].system
    return verify_ccm(metric, sys, metric_grid(cfg), box_vertices(cfg.theta_lower, cfg.theta_upper))
