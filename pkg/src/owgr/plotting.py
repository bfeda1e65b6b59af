"""Static SVG box plots of sweep summaries."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .envelope import _method_key, value_sort_key  # noqa: E402

_LABELS = {"A": "average accuracy", "F": "forgetting"}


def boxplot_svg(summary: list[dict], metric: str, path) -> Path:
    """One box per (method, value) for ``metric``, grouped by swept value.

    Each box's ``<g>`` element carries ``id="box-<method>-<value>"``; the mean
    is drawn as a marker.
    """
    rows = [s for s in summary if s["metric"] == metric]
    values = sorted({s["value"] for s in rows}, key=value_sort_key)
    methods = sorted({s["method"] for s in rows}, key=_method_key)
    width = 0.8 / max(len(methods), 1)
    colors = plt.get_cmap("tab10").colors
    with plt.rc_context({"svg.hashsalt": "owgr", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(values) * max(len(methods), 1) * 0.5), 3.6))
        for mi, method in enumerate(methods):
            stats, pos = [], []
            for vi, value in enumerate(values):
                match = [s for s in rows if s["method"] == method and s["value"] == value]
                if not match:
                    continue
                s = match[0]
                stats.append(
                    {
                        "med": s["median"],
                        "q1": s["q1"],
                        "q3": s["q3"],
                        "whislo": s["min"],
                        "whishi": s["max"],
                        "mean": s["mean"],
                        "label": f"{method}-{value}",
                    }
                )
                pos.append(vi + (mi - (len(methods) - 1) / 2) * width)
            if not stats:
                continue
            art = ax.bxp(
                stats,
                positions=pos,
                widths=width * 0.85,
                showmeans=True,
                showfliers=False,
                patch_artist=True,
                manage_ticks=False,
                meanprops={"marker": "^", "markerfacecolor": "white", "markeredgecolor": "black"},
            )
            for box, st in zip(art["boxes"], stats):
                box.set_facecolor(colors[mi % len(colors)])
                box.set_gid(f"box-{st['label']}")
            art["boxes"][0].set_label(method)
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(values)
        ax.set_xlabel(rows[0]["param"] if rows else "")
        ax.set_ylabel(_LABELS.get(metric, metric))
        if methods:
            ax.legend(loc="best", fontsize="small")
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return path
