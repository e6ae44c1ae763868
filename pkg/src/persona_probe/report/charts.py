"""Grouped bar charts with permutation-dispersion whiskers, written as SVG.

Output is byte-stable: the SVG id salt and metadata are fixed and the
figure is drawn inside an isolated rc context.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..tensor import ScoreTensor  # noqa: E402

CHART_KINDS = ("grouped_bars",)

_RC = {
    "svg.hashsalt": "persona-probe",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


class ChartError(ValueError):
    pass


@dataclass(frozen=True)
class ChartSpec:
    kind: str = "grouped_bars"
    which: str = "normalized"
    title: str = ""

    def __post_init__(self) -> None:
        if self.kind not in CHART_KINDS:
            raise ChartError(f"unknown chart kind {self.kind!r}; known: {CHART_KINDS}")


def bar_data(tensor: ScoreTensor, which: str = "normalized") -> tuple[list[str], np.ndarray, np.ndarray]:
    """Condition labels, bar heights and whiskers, each (conditions, dimensions).

    A condition is one (context, perspective) pair.  Heights are means and
    whiskers population standard deviations over permutations.
    """
    v = tensor.values(which)
    labels = []
    for c in tensor.contexts:
        for p in tensor.perspectives:
            if len(tensor.contexts) == 1:
                labels.append(p)
            elif len(tensor.perspectives) == 1:
                labels.append(c)
            else:
                labels.append(f"{c} | {p}")
    flat = v.reshape(-1, v.shape[2], v.shape[3])
    heights = np.nanmean(flat, axis=1)
    whiskers = np.nanstd(flat, axis=1)
    return labels, heights, whiskers


def render_grouped_bars(tensor: ScoreTensor, spec: ChartSpec = ChartSpec()) -> bytes:
    if tensor.raw.size == 0:
        raise ChartError("empty tensor")
    labels, heights, whiskers = bar_data(tensor, spec.which)
    n_cond, n_dim = heights.shape
    width = 0.8 / n_cond
    x = np.arange(n_dim)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * n_dim * max(1, n_cond) / 2), 3.2))
        cmap = plt.get_cmap("tab10" if n_cond <= 10 else "tab20")
        for i, label in enumerate(labels):
            ax.bar(x - 0.4 + width * (i + 0.5), heights[i], width, yerr=whiskers[i],
                   color=cmap(i % cmap.N), label=label, capsize=2, error_kw={"elinewidth": 0.6})
        ax.set_xticks(x)
        ax.set_xticklabels(tensor.dimensions, rotation=45, ha="right")
        ax.set_ylabel("normalized score" if spec.which == "normalized" else "raw score")
        ax.set_title(spec.title or f"{tensor.questionnaire_id} {tensor.meta.get('variant', '')}".strip())
        ax.legend(fontsize=6, frameon=False, ncol=min(4, n_cond), loc="upper center",
                  bbox_to_anchor=(0.5, -0.28))
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": "persona-probe"})
        plt.close(fig)
    return buf.getvalue()


def emit_charts(tensor: ScoreTensor, spec: ChartSpec = ChartSpec(), path: str | Path | None = None) -> bytes:
    data = render_grouped_bars(tensor, spec)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    return data
