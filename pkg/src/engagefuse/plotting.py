"""Grouped F1 bar chart of a metrics report, one panel per section."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from engagefuse.evaluation import CLASS_HEADERS, CLASS_ROWS, MODEL_HEADERS, MetricsReport  # noqa: E402
from engagefuse.fileio import atomic_write_bytes  # noqa: E402


def render_f1_figure(report: MetricsReport) -> bytes:
    """PNG bytes; no timestamp or version metadata, so equal reports give equal files."""
    fig, axes = plt.subplots(1, len(report.sections), figsize=(5.0 * len(report.sections) + 1.0, 3.6),
                             sharey=True, squeeze=False)
    x = np.arange(len(CLASS_ROWS))
    width = 0.8 / len(report.models)
    for ax, section in zip(axes[0], report.sections):
        for j, model in enumerate(report.models):
            heights = [report.value(section, model, c) for c in CLASS_ROWS]
            ax.bar(x + (j - (len(report.models) - 1) / 2) * width, heights, width,
                   label=MODEL_HEADERS.get(model, model))
        ax.set_title(section)
        ax.set_xticks(x)
        ax.set_xticklabels([CLASS_HEADERS[c] for c in CLASS_ROWS])
        ax.set_ylim(0.0, 1.0)
        ax.grid(axis="y", alpha=0.3)
    axes[0][0].set_ylabel("F1")
    axes[0][-1].legend(loc="upper left", bbox_to_anchor=(1.01, 1.0), fontsize="small")
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def save_f1_figure(report: MetricsReport, path: Union[str, Path]) -> Path:
    return atomic_write_bytes(path, render_f1_figure(report))
