"""Matplotlib heatmaps of per-step field attention."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def attention_heatmap(path: str | Path, matrix: np.ndarray, tokens: Sequence[str],
                      fields: Sequence[str], title: str = "") -> None:
    """Save a (steps x fields) weight matrix as a PNG with labelled axes."""
    m = np.asarray(matrix)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("heatmap needs a nonempty 2-D matrix")
    height = max(2.5, 0.25 * m.shape[0] + 1.0)
    width = max(3.0, 0.35 * m.shape[1] + 2.0)
    fig, ax = plt.subplots(figsize=(width, height))
    try:
        im = ax.imshow(m, cmap="Greys", vmin=0.0, vmax=1.0, aspect="auto")
        ax.set_xticks(range(m.shape[1]))
        ax.set_xticklabels(fields, rotation=60, ha="right", fontsize=7)
        ax.set_yticks(range(m.shape[0]))
        ax.set_yticklabels(tokens, fontsize=7)
        ax.set_xlabel("field")
        ax.set_ylabel("generated token")
        if title:
            ax.set_title(title, fontsize=9)
        fig.colorbar(im, ax=ax, fraction=0.04)
        fig.tight_layout()
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)
