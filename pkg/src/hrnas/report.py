"""Figure rendering for search logs, cost reports and block compositions.

Every report the CLI writes as delimited text (CSV log, FLOPs JSON, plot-data
JSON) gets a rendered figure next to it; all rendering targets files via the
Agg backend.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

_SECTOR_COLORS = {
    "conv3": "#4fc3f7",
    "conv5": "#e57373",
    "conv7": "#ffd54f",
    "tokens": "#81c784",
    "removed": "#c8c8c8",
}


def render_search_curves(log_rows: list[dict], path: str | Path) -> Path:
    """Loss/penalty and FLOPs/alive-unit trajectories over epochs."""
    epochs = [r["epoch"] for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, [r["task_loss"] for r in log_rows], label="task loss", color="#1565c0")
    ax1.plot(epochs, [r["penalty"] for r in log_rows], label="penalty", color="#ef6c00")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [r["total_flops"] for r in log_rows], color="#2e7d32")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("total MACs", color="#2e7d32")
    twin = ax2.twinx()
    twin.plot(epochs, [r["alive_units"] for r in log_rows], color="#6a1b9a", linestyle="--")
    twin.set_ylabel("alive units", color="#6a1b9a")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_flops_chart(report: dict, path: str | Path) -> Path:
    """Horizontal bars of per-block MACs, MixConv vs. transformer stacked."""
    blocks = report["blocks"]
    names = [b["path"] for b in blocks] + ["stem", "head"]
    mix = [b["mixconv"] for b in blocks] + [0, 0]
    tr = [b["transformer"] for b in blocks] + [0, 0]
    rest = [0] * len(blocks) + [report["stem"], report["head"]]
    ys = range(len(names))
    fig, ax = plt.subplots(figsize=(8, max(3, 0.35 * len(names))))
    ax.barh(ys, mix, color=_SECTOR_COLORS["conv5"], label="mixconv")
    ax.barh(ys, tr, left=mix, color=_SECTOR_COLORS["tokens"], label="transformer")
    ax.barh(ys, rest, color="#90a4ae")
    ax.set_yticks(list(ys), names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("MACs")
    ax.set_title(f"total {report['total']:,} MACs")
    ax.legend(loc="lower right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_block_sectors(plotdata: dict, path: str | Path) -> Path:
    """One sector chart per searching block: surviving 3×3/5×5/7×7 channels,
    tokens, and removed units."""
    blocks = plotdata["blocks"]
    cols = min(6, max(1, len(blocks)))
    rows = (len(blocks) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.1 * cols, 2.3 * rows), squeeze=False)
    keys = ("conv3", "conv5", "conv7", "tokens", "removed")
    for ax in axes.flat:
        ax.axis("off")
    for ax, blk in zip(axes.flat, blocks):
        values = [blk[k] for k in keys]
        if sum(values) == 0:
            continue
        ax.pie(values, colors=[_SECTOR_COLORS[k] for k in keys], startangle=90)
        ax.set_title(blk["path"], fontsize=7)
    handles = [plt.Line2D([0], [0], marker="s", linestyle="", color=_SECTOR_COLORS[k], label=k)
               for k in keys]
    fig.legend(handles=handles, loc="lower center", ncol=len(keys), fontsize=8)
    fig.tight_layout(rect=(0, 0.06, 1, 1))
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
