"""Trace and summary output: CSV, aligned text tables and figures."""
from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

PITCH_STATES = ("theta_pitch", "alpha", "q")


def atomic_write(path, data, mode="w"):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    # repr of a Python float is the shortest round-trip string, so equal runs give equal bytes
    return repr(float(v))


def trace_columns(trace) -> list:
    names = list(trace.extras.get("state_names", PITCH_STATES))
    p = trace.extras["theta_B"].shape[1]
    cols = ["t"] + names + ["u", "eps", "h_r", "E"]
    for key in ("theta_B", "theta_C", "box_lo", "box_hi"):
        cols += [f"{key}_{i}" for i in range(1, p + 1)]
    return cols + ["safety_active"]


def trace_rows(trace):
    ex = trace.extras
    for k in range(len(trace)):
        row = [trace.t[k], *trace.x[k], trace.u[k, 0], ex["eps"][k], ex["h_r"][k], ex["E"][k]]
        for key in ("theta_B", "theta_C", "box_lo", "box_hi"):
            row += list(ex[key][k])
        yield [_fmt(v) for v in row] + [str(int(ex["safety_active"][k]))]


def write_trace_csv(trace, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trace_columns(trace))
    w.writerows(trace_rows(trace))
    atomic_write(path, buf.getvalue())


def read_trace_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    return {name: body[:, j] for j, name in enumerate(header)}


def _table_text(header, rows) -> str:
    widths = [max(len(h), *(len(r[j]) for r in rows)) if rows else len(h) for j, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def summary_table(summaries, failed=()):
    """Header and string rows; failed runs get ``status=failed`` and empty metrics."""
    dicts = [s.row() for s in summaries]
    header = ["source", "status"]
    for d in dicts:
        header += [k for k in d if k not in header]
    rows = []
    for s, d in zip(summaries, dicts):
        rows.append([getattr(s, "source", "") or "", "ok"] +
                    [_cell(d.get(k, "")) for k in header[2:]])
    for cfg, msg in failed:
        rows.append([Path(cfg.source).name if cfg.source else "", "failed", cfg.scenario, cfg.method] + [""] * (len(header) - 4))
    return header, rows


def _cell(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return _fmt(v)


def write_summary_table(summaries, path, failed=()):
    """``path`` gets the CSV; a ``.txt`` sibling gets the aligned table, a
    ``_timing.csv`` sibling the wall-clock statistics (kept apart so the main
    table is reproducible byte for byte)."""
    path = Path(path)
    header, rows = summary_table(summaries, failed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(path, buf.getvalue())
    atomic_write(path.with_suffix(".txt"), _table_text(header, rows))

    tkeys = sorted({k for s in summaries for k in s.timings_ms})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "scenario", "method", "wall_clock_s"] + [f"{k}_ms" for k in tkeys])
    for s in summaries:
        w.writerow([getattr(s, "source", "") or "", s.scenario, s.method, f"{s.wall_clock_s:.3f}"] +
                   [f"{s.timings_ms.get(k, float('nan')):.4f}" for k in tkeys])
    atomic_write(path.with_name(path.stem + "_timing.csv"), buf.getvalue())


def _figure_module():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    plt = _figure_module()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110)
    plt.close(fig)
    atomic_write(path, buf.getvalue(), mode="wb")


def write_trace_figure(trace, cfg, path):
    """State/input, barrier, energy and parameter-bound panels for one run."""
    plt = _figure_module()
    ex = trace.extras
    names = list(ex.get("state_names", PITCH_STATES))
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    t = trace.t
    ax = axes[0, 0]
    idx = names.index("q") if "q" in names else 0
    scale = 180 / np.pi if "q" in names else 1.0
    ax.plot(t, trace.x[:, idx] * scale, label=names[idx])
    if "q" in names:
        ax.axhline(cfg.q_max_deg, color="k", ls="--", lw=0.8)
        ax.set_ylabel("q [deg/s]")
    ax2 = ax.twinx()
    ax2.plot(t, trace.u[:, 0], color="tab:orange", lw=0.8, label="u")
    ax2.set_ylabel("u")
    ax.set_title(f"{cfg.scenario} / {cfg.method}")
    ax = axes[0, 1]
    ax.plot(t, ex["h_r"], label="h_r")
    ax.plot(t, ex["margin"], ls="--", label="tightening")
    ax.legend()
    ax.set_title("barrier")
    ax = axes[1, 0]
    ax.semilogy(t, np.maximum(ex["E"], 1e-16))
    ax.set_title("Riemannian energy")
    ax.set_xlabel("t [s]")
    ax = axes[1, 1]
    for i in range(ex["box_lo"].shape[1]):
        line, = ax.plot(t, ex["box_lo"][:, i], label=f"param {i + 1}")
        ax.plot(t, ex["box_hi"][:, i], color=line.get_color())
        ax.axhline(cfg.theta_true[i], color=line.get_color(), ls=":", lw=0.8)
    ax.legend()
    ax.set_title("parameter bounds")
    ax.set_xlabel("t [s]")
    fig.tight_layout()
    _save(fig, path)


def write_comparison_figure(runs, path):
    """Overlay q (or x), u and h_r for several ``(cfg, trace)`` runs."""
    plt = _figure_module()
    fig, axes = plt.subplots(3, 1, figsize=(9, 9), sharex=True)
    for cfg, trace in runs:
        names = list(trace.extras.get("state_names", PITCH_STATES))
        idx = names.index("q") if "q" in names else 0
        scale = 180 / np.pi if "q" in names else 1.0
        label = f"{cfg.scenario}/{cfg.method}"
        axes[0].plot(trace.t, trace.x[:, idx] * scale, label=label)
        axes[1].plot(trace.t, trace.u[:, 0], lw=0.8, label=label)
        axes[2].plot(trace.t, trace.extras["h_r"], label=label)
    axes[0].set_ylabel("q [deg/s] or x")
    axes[1].set_ylabel("u")
    axes[2].set_ylabel("h_r")
    axes[2].set_xlabel("t [s]")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
