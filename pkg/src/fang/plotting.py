"""Figures for run reports."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def new_figure(width=5.0, ratio=0.62):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, width * ratio))
    return fig, ax


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_sparsity(report, path):
    layers = report["layers"]
    idx = np.arange(len(layers))
    with plt.rc_context(STYLE):
        fig, ax = new_figure()
        ax.bar(idx - 0.2, [e["sp_target"] for e in layers], 0.4, label="planned", color="0.7")
        ax.bar(idx + 0.2, [e["realized_sparsity"] for e in layers], 0.4, label="realized", color="C0")
        ax.axhline(report["summary"]["target_sparsity"], color="k", lw=0.8, ls="--", label="target")
        ax.set_xlabel("block")
        ax.set_ylabel("sparsity")
        ax.set_xticks(idx)
        fc_ax = ax.twinx()
        fc_ax.plot(idx, [e["fc"] for e in layers], "o-", color="C3", label="FC")
        fc_ax.set_ylabel("functional complexity", color="C3")
        fc_ax.spines["top"].set_visible(False)
        handles = ax.get_legend_handles_labels()[0] + fc_ax.get_legend_handles_labels()[0]
        ax.legend(handles=handles, loc="lower center", bbox_to_anchor=(0.5, 1.0), ncol=4, frameon=False)
        return _save(fig, path)


def plot_errors(report, path):
    layers = report["layers"]
    idx = np.arange(len(layers))
    with plt.rc_context(STYLE):
        fig, ax = new_figure()
        before = [max(e["ffn_error_before"], 1e-12) for e in layers]
        after = [max(e["ffn_error_after"], 1e-12) for e in layers]
        ax.bar(idx - 0.2, before, 0.4, label="masked only", color="0.7")
        ax.bar(idx + 0.2, after, 0.4, label="compensated", color="C2")
        ax.set_yscale("log")
        ax.set_xticks(idx)
        ax.set_xlabel("block")
        ax.set_ylabel("FFN reconstruction error")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_group_pruning(report, path):
    layers = [e for e in report["layers"] if e.get("groups")]
    if not layers:
        return None
    k = max(len(e["groups"]) for e in layers)
    grid = np.full((len(layers), k), np.nan)
    for i, e in enumerate(layers):
        for g in e["groups"]:
            grid[i, g["group"]] = g["pruned"] / max(g["size"], 1)
    with plt.rc_context(STYLE):
        fig, ax = new_figure()
        im = ax.imshow(grid, aspect="auto", cmap="viridis", vmin=0, vmax=1)
        ax.set_xticks(range(k))
        ax.set_xlabel("functional group")
        ax.set_ylabel("block")
        ax.set_yticks(range(len(layers)))
        ax.set_yticklabels([e["layer"] for e in layers])
        fig.colorbar(im, ax=ax, label="group sparsity")
        return _save(fig, path)


def render_report_figures(report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [plot_sparsity(report, out / "sparsity.png"), plot_errors(report, out / "errors.png")]
    grouped = plot_group_pruning(report, out / "groups.png")
    if grouped is not None:
        paths.append(grouped)
    return paths
