"""Figure rendering for experiment reports.

The CSV/JSON files remain the contract; the figures are a convenience
rendered alongside them by the report path of the CLI.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import CONDITIONS, SCHEMES, ReportBundle  # noqa: E402

_SCHEME_COLORS = {
    "original": "tab:blue",
    "data_added": "tab:orange",
    "random": "tab:green",
    "robust": "tab:red",
}


def render_costs_figure(bundle: ReportBundle, out_dir) -> str:
    """Grouped bars: mean overall cost per scheme, grouped by condition."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    width = 0.2
    for j, scheme in enumerate(SCHEMES):
        xs = [i + (j - 1.5) * width for i in range(len(CONDITIONS))]
        ys = [bundle.result(scheme, c).mean_J for c in CONDITIONS]
        ax.bar(xs, ys, width=width, label=scheme,
               color=_SCHEME_COLORS.get(scheme))
    ax.set_xticks(range(len(CONDITIONS)))
    ax.set_xticklabels(CONDITIONS)
    ax.set_ylabel("mean overall cost J")
    ax.set_yscale("log")
    ax.set_title(f"{bundle.experiment}: overall cost by scheme and condition")
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "costs.png")
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_history_figure(bundle: ReportBundle, out_dir) -> str | None:
    """Robust-training trace: mean J and both gradient norms per round."""
    hist = bundle.histories.get("robust")
    if not hist or not hist.get("mean_J"):
        return None
    rounds = range(len(hist["mean_J"]))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(rounds, [float(v) for v in hist["mean_J"]], color="tab:red")
    ax1.set_xlabel("round")
    ax1.set_ylabel("mean J")
    ax2.plot(rounds, [float(v) for v in hist["grad_f_norm"]],
             label="forecaster")
    ax2.plot(rounds, [float(v) for v in hist["grad_a_norm"]],
             label="adversary")
    ax2.set_xlabel("round")
    ax2.set_ylabel("gradient norm")
    ax2.set_yscale("log")
    ax2.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "training.png")
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
