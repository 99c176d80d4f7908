"""Figure rendering for simulation outputs.

Turns the delimited summary written by the simulation runner into the
standard diagnostic plots: mean selected group count against the group-size
exponent (one panel per penalty), group-3 RMSE, and the proportion of
perfect classification. Files are written next to the CSVs they come from.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

_COLORS = ["#c0392b", "#111111", "#2457a8", "#1e8449", "#8e44ad", "#b7950b"]
_STYLES = ["-", "--", ":", "-."]


def _line_style(n_values: list, t_values: list, n, t) -> dict:
    color = _COLORS[n_values.index(n) % len(_COLORS)]
    style = _STYLES[t_values.index(t) % len(_STYLES)]
    return {"color": color, "linestyle": style}


def _series_panel(ax, df: pd.DataFrame, value: str) -> None:
    n_values = sorted(df["n"].unique().tolist())
    t_values = sorted(df["t"].unique().tolist())
    for n in n_values:
        for t in t_values:
            cell = df[(df["n"] == n) & (df["t"] == t)].sort_values("alpha")
            if cell.empty:
                continue
            ax.plot(
                cell["alpha"], cell[value], marker="o", markersize=3,
                label=f"N={n}, T={t}", **_line_style(n_values, t_values, n, t),
            )
    ax.set_xlabel(r"group-size exponent $\alpha$")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)


def plot_mean_k(summary: pd.DataFrame, out_dir: Path) -> list[Path]:
    """One figure per penalty: mean selected K against alpha."""
    paths = []
    for pen in summary["penalty"].unique():
        df = summary[summary["penalty"] == pen]
        fig, ax = plt.subplots(figsize=(5.5, 4))
        _series_panel(ax, df, "mean_k_hat")
        ax.axhline(3.0, color="gray", linewidth=0.8, alpha=0.6)
        ax.set_ylabel(r"mean $\widehat{K}$")
        ax.set_title(f"Mean selected group count, penalty {pen}")
        fig.tight_layout()
        path = out_dir / f"mean_k_{pen}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        paths.append(path)
    return paths


def _metric_figure(summary: pd.DataFrame, value: str, ylabel: str,
                   title: str, path: Path) -> Path:
    # metrics are penalty-independent: keep one row per design cell
    df = summary.drop_duplicates(subset=["dgp", "n", "t", "alpha"])
    fig, ax = plt.subplots(figsize=(5.5, 4))
    _series_panel(ax, df, value)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_report(summary: pd.DataFrame, out_dir: str | Path) -> list[Path]:
    """Render all figures for a simulation summary; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = plot_mean_k(summary, out_dir)
    paths.append(
        _metric_figure(summary, "rmse_mean", "mean RMSE",
                       "Group-3 RMSE at K=3", out_dir / "rmse_group3.png")
    )
    paths.append(
        _metric_figure(summary, "ppc", "PPC",
                       "Proportion of perfect classification",
                       out_dir / "ppc.png")
    )
    return paths
