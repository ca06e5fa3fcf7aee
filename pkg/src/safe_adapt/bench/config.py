"""Scenario configuration files.

Flat ``key = value`` INI files read with :mod:`configparser`. Matrices are
row-major with ``;`` between rows and ``,`` between entries. A file may name a
``base`` file (relative to itself) whose values it overrides.
"""
from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

METHODS = ("modified_acbf", "racbf", "racbf_smid")
SCENARIOS = ("immelmann", "sine_tracking", "example1")


class ConfigError(ValueError):
    """Bad configuration; ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass
class MetricConfig:
    rows: list
    rate: float
    coordinate: int = 1
    grid_alpha_deg: tuple = (-5.0, 50.0)
    grid_q_deg: tuple = (-10.0, 50.0)
    grid_points: tuple = (25, 25)
    scale: float = 1.0  # W is divided by this; the metric conditions are invariant to it


@dataclass
class ScenarioConfig:
    scenario: str
    method: str
    theta_true: np.ndarray
    theta_lower: np.ndarray
    theta_upper: np.ndarray
    x0: np.ndarray
    gamma_B: float = 20.0
    gamma_C: float = 50.0
    class_k_slope: float = 10.0
    slack_weight: float = 1e3
    q_max_deg: float = 50.0
    sigma: Optional[float] = None
    disturbance_bound: float = 0.1
    window: int = 50
    stride: int = 10
    rate_error_bound: float = 0.0
    dt: float = 1e-3
    horizon: float = 10.0
    seed: int = 0
    theta_hat0: Optional[np.ndarray] = None
    geodesic: dict = field(default_factory=dict)
    metric: Optional[MetricConfig] = None
    source: Optional[str] = None

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def parse_vector(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.replace(";", ",").split(",") if v.strip()])


def parse_matrix(text: str) -> np.ndarray:
    rows = [r for r in text.split(";") if r.strip()]
    mat = [[float(v) for v in r.split(",")] for r in rows]
    if len({len(r) for r in mat}) != 1:
        raise ValueError("ragged matrix rows")
    return np.array(mat)


def _line_of(lines, section, key):
    """1-based line of ``key`` inside ``[section]``, or None."""
    current = None
    pat = re.compile(rf"^\s*{re.escape(key)}\s*[=:]", re.IGNORECASE)
    for i, text in enumerate(lines, 1):
        m = re.match(r"^\s*\[([^\]]+)\]", text)
        if m:
            current = m.group(1).strip()
        elif current == section and pat.match(text):
            return i
    return None


def _read_chain(path: Path, seen=()):
    """Parsers for ``path`` and its bases, base first."""
    path = path.resolve()
    if path in seen:
        raise ConfigError("circular base reference", path)
    if not path.is_file():
        raise ConfigError("no such config file", path)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    text = path.read_text()
    try:
        cp.read_string(text, source=str(path))
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f"cannot parse: {exc.message.splitlines()[0]}", path, line) from exc
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], path, getattr(exc, "lineno", None)) from exc
    chain = []
    base = cp.get("scenario", "base", fallback=None)
    if base:
        chain = _read_chain(path.parent / base, seen + (path,))
    return chain + [(path, text.splitlines(), cp)]


class _Values:
    """Merged view over a base chain that remembers where each value came from."""

    def __init__(self, chain):
        self.chain = chain

    def lookup(self, section, key):
        for path, lines, cp in reversed(self.chain):
            if cp.has_option(section, key):
                return cp.get(section, key), path, _line_of(lines, section, key)
        return None, self.chain[-1][0], None

    def get(self, section, key, convert=str, default=dataclasses.MISSING):
        raw, path, line = self.lookup(section, key)
        if raw is None:
            if default is dataclasses.MISSING:
                raise ConfigError(f"missing [{section}] {key}", path)
            return default
        try:
            return convert(raw.strip())
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for [{section}] {key}: {raw.strip()!r} ({exc})", path, line) from exc

    def check(self, ok, message, section, key):
        if not ok:
            raw, path, line = self.lookup(section, key)
            raise ConfigError(message, path, line)

    def has_section(self, section):
        return any(cp.has_section(section) for _, _, cp in self.chain)


def _pair(text):
    v = parse_vector(text)
    if v.size != 2:
        raise ValueError("expected two numbers")
    return tuple(v)


def _flag(text) -> bool:
    low = text.strip().lower()
    if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
        raise ValueError("expected a boolean")
    return low in ("true", "yes", "1", "on")


def load_config(path) -> ScenarioConfig:
    """Parse and validate a scenario file."""
    path = Path(path)
    vals = _Values(_read_chain(path))
    g = vals.get

    scenario = g("scenario", "name")
    vals.check(scenario in SCENARIOS, f"unknown scenario {scenario!r}", "scenario", "name")
    method = g("scenario", "method")
    vals.check(method in METHODS, f"unknown method {method!r}", "scenario", "method")

    theta_true = g("plant", "theta_true", parse_vector)
    lower = g("plant", "theta_lower", parse_vector)
    upper = g("plant", "theta_upper", parse_vector)
    vals.check(lower.size == upper.size == theta_true.size, "parameter vectors differ in length",
               "plant", "theta_upper")
    vals.check(np.all(lower <= upper), "theta_lower above theta_upper", "plant", "theta_upper")
    x0 = g("plant", "x0", parse_vector)
    theta_hat0 = g("controller", "theta_hat0", parse_vector, None)

    cfg = ScenarioConfig(
        scenario=scenario, method=method, theta_true=theta_true, theta_lower=lower, theta_upper=upper,
        x0=x0, theta_hat0=theta_hat0,
        gamma_B=g("controller", "gamma_B", float, 20.0),
        gamma_C=g("controller", "gamma_C", float, 50.0),
        class_k_slope=g("controller", "class_k_slope", float, 10.0),
        slack_weight=g("controller", "slack_weight", float, 1e3),
        q_max_deg=g("controller", "q_max_deg", float, 50.0),
        sigma=g("controller", "sigma", float, None),
        disturbance_bound=g("smid", "disturbance_bound", float, 0.1),
        window=g("smid", "window", int, 50),
        stride=g("smid", "stride", int, 10),
        rate_error_bound=g("smid", "rate_error_bound", float, 0.0),
        dt=g("scenario", "dt", float, 1e-3),
        horizon=g("scenario", "horizon", float, 10.0),
        seed=g("scenario", "seed", int, 0),
        geodesic={k: g("geodesic", k, conv, None) for k, conv in
                  (("N", int), ("K", int), ("max_iter", int), ("f_tol", float), ("region_weight", float),
                   ("restart_linear", _flag), ("confine", _flag))
                  if g("geodesic", k, str, None) is not None},
        source=str(path),
    )
    for key in ("gamma_B", "gamma_C", "class_k_slope", "slack_weight", "q_max_deg", "dt", "horizon",
                "disturbance_bound"):
        section = {"disturbance_bound": "smid", "dt": "scenario", "horizon": "scenario"}.get(key, "controller")
        vals.check(getattr(cfg, key) > 0, f"{key} must be positive", section, key)
    vals.check(cfg.window > 0 and cfg.stride > 0, "window and stride must be positive", "smid", "stride")
    if cfg.sigma is not None:
        vals.check(cfg.sigma > 0, "sigma must be positive", "controller", "sigma")

    if vals.has_section("metric"):
        rows = [g("metric", f"W{j}") for j in range(3) if g("metric", f"W{j}", str, None) is not None]
        vals.check(bool(rows), "metric section without coefficients", "metric", "W0")
        for j, r in enumerate(rows):
            try:
                parse_matrix(r)
            except ValueError as exc:
                _, p, line = vals.lookup("metric", f"W{j}")
                raise ConfigError(f"bad matrix W{j}: {exc}", p, line) from exc
        cfg.metric = MetricConfig(
            rows=rows,
            rate=g("metric", "rate", float),
            coordinate=g("metric", "coordinate", int, 1),
            grid_alpha_deg=g("metric", "grid_alpha_deg", _pair, (-5.0, 50.0)),
            grid_q_deg=g("metric", "grid_q_deg", _pair, (-10.0, 50.0)),
            grid_points=tuple(int(v) for v in g("metric", "grid_points", _pair, (25, 25))),
            scale=g("metric", "scale", float, 1.0),
        )
        vals.check(cfg.metric.scale > 0, "scale must be positive", "metric", "scale")
    return cfg
