"""Presentation-only PNG output; numeric truth always lives elsewhere."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .phantoms import PixelImage


def save_image_grid(
    path,
    rows: list[list[PixelImage]],
    col_titles: list[str],
    row_labels: list[str] | None = None,
    cmap: str = "viridis",
) -> None:
    """One PNG: a panel grid with shared color scale per row."""
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    fig, axes = plt.subplots(
        n_rows, n_cols, figsize=(2.2 * n_cols, 2.3 * n_rows), squeeze=False
    )
    for i, row in enumerate(rows):
        vmin = min(float(img.values.min()) for img in row)
        vmax = max(float(img.values.max()) for img in row)
        if vmin == vmax:
            vmin, vmax = vmin - 1e-9, vmax + 1e-9
        for j in range(n_cols):
            ax = axes[i][j]
            ax.set_axis_off()
            if j >= len(row):
                continue
            shown = np.where(row[j].mask, row[j].values, np.nan)
            ax.imshow(shown, cmap=cmap, vmin=vmin, vmax=vmax,
                      interpolation="nearest")
            if i == 0 and j < len(col_titles):
                ax.set_title(col_titles[j], fontsize=9)
            if j == 0 and row_labels is not None:
                ax.text(
                    -0.08, 0.5, row_labels[i], transform=ax.transAxes,
                    rotation=90, va="center", ha="center", fontsize=8,
                )
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
