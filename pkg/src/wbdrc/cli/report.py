"""PNG figures and delta tables for scenario runs."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
}
COLORS = {"wbdrc": "tab:blue", "standard": "tab:red"}
LABELS = {"wbdrc": "WB-DRC", "standard": "standard WBC"}


def _col(report, name):
    return report.trace["data"][:, report.trace["columns"].index(name)]


def _block(report, prefix, count=None):
    cols = report.trace["columns"]
    idx = [i for i, c in enumerate(cols) if c.startswith(prefix)]
    if count is not None:
        idx = idx[:count]
    return report.trace["data"][:, idx], [cols[i][len(prefix):] for i in idx]


def _desired_height(report):
    from ..model import load_model
    scen = report.scenario
    return scen.height if scen.height is not None else load_model(scen.robot).default_height


def plot_height(reports, path: Path, title: str = "") -> Path:
    """Base height against time for one or more runs of the same scenario."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        for rep in reports:
            v = rep.scenario.variant
            ax.plot(_col(rep, "t"), _col(rep, "base_height"), color=COLORS.get(v), label=LABELS.get(v, v))
            if rep.metrics["fell"]:
                ax.axvline(rep.metrics["fall_time"], color=COLORS.get(v), ls=":", lw=0.8)
        ax.axhline(_desired_height(reports[0]), color="k", ls="--", lw=0.8, label="desired")
        ax.set_xlabel("time [s]")
        ax.set_ylabel("base height [m]")
        ax.set_title(title or reports[0].scenario.name)
        ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def plot_estimate(report, path: Path) -> Path:
    """Filtered disturbance estimate against the injected generalized force, base rows."""
    nb = 6 if report.scenario.robot != "planar3" else 3
    fhat, names = _block(report, "fhat_", nb)
    d, _ = _block(report, "d_", nb)
    t = _col(report, "t")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nb, 1, figsize=(6.0, 1.3 * nb), sharex=True)
        for k, ax in enumerate(np.atleast_1d(axes)):
            ax.plot(t, d[:, k], color="0.5", lw=0.8, label="injected")
            ax.plot(t, fhat[:, k], color="tab:blue", label="estimate")
            ax.set_ylabel(names[k], fontsize=7)
        np.atleast_1d(axes)[0].legend(loc="upper right")
        np.atleast_1d(axes)[-1].set_xlabel("time [s]")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def plot_theta(report, path: Path, bound: float) -> Path:
    """Adaptive parameter trace with its projection box."""
    theta, _ = _block(report, "theta_")
    t = _col(report, "t")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.0))
        ax.plot(t, theta, lw=0.7)
        for b in (-bound, bound):
            ax.axhline(b, color="k", ls="--", lw=0.8)
        ax.set_xlabel("time [s]")
        ax.set_ylabel(r"$\hat\theta$")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def render_run(report, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{report.scenario.name}-{report.scenario.variant}"
    figs = [plot_height([report], out_dir / f"{stem}-height.png"),
            plot_estimate(report, out_dir / f"{stem}-estimate.png"),
            plot_theta(report, out_dir / f"{stem}-theta.png", report.scenario.gains.theta_bound)]
    report.figures.extend(figs)
    return figs


def delta_table(base, other) -> list:
    """Rows of (metric, wbdrc, standard, ratio) for a paired comparison."""
    rows = []
    for key in ("height_rmse", "max_height_deviation", "fell", "fall_time", "wbc_faults", "theta_max_abs"):
        a, b = base.metrics[key], other.metrics[key]
        ratio = a / b if isinstance(a, float) and isinstance(b, float) and b > 0 else None
        rows.append((key, a, b, ratio))
    return rows


def format_table(rows) -> str:
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, bool):
            return "yes" if v else "no"
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)
    lines = [f"{'metric':<22}{'wbdrc':>12}{'standard':>12}{'ratio':>10}"]
    lines += [f"{k:<22}{fmt(a):>12}{fmt(b):>12}{fmt(r):>10}" for k, a, b, r in rows]
    return "\n".join(lines)


def render_compare(base, other, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = plot_height([base, other], out_dir / f"{base.scenario.name}-compare-height.png")
    base.figures.append(path)
    other.figures.append(path)
    return path


def write_delta(rows, path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "wbdrc", "standard", "ratio"])
        for row in rows:
            w.writerow(["" if v is None else v for v in row])
    return path
