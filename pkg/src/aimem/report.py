"""Tables and figures for score matrices and benchmark results.

Figures are SVG. Matplotlib's SVG writer embeds a date and random element
ids by default; both are pinned here so that reruns produce identical files.
"""

from __future__ import annotations

import csv
import re
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import UserError  # noqa: E402

RC = {
    "svg.hashsalt": "aimem",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
}

MODE_TITLES = {
    "multi": "Multi-needle (uniform depth)",
    "single@0.4": "Single-needle (combined at depth 40%)",
    "single@0.6": "Single-needle (combined at depth 60%)",
}


def _fmt(mean: float | None) -> str:
    return "n/a" if mean is None else f"{mean:.1f}"


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


def _ensure_dir(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UserError(f"cannot create output directory {out}: {exc}")
    return out


def _save(fig, path: Path) -> None:
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise UserError(f"cannot write {path}: {exc}")
    finally:
        plt.close(fig)


def write_matrix_table(matrix, path: str | Path) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["provider", "mode", "context_length", "hops", "mean", "n", "status"])
            for row in matrix.rows():
                w.writerow(
                    [row["provider"], row["mode"], row["context_length"], row["hops"],
                     _fmt(row["mean"]), row["n"], row["status"]]
                )
    except OSError as exc:
        raise UserError(f"cannot write {path}: {exc}")
    return path


def heatmap(matrix, provider: str, mode: str, path: str | Path) -> Path:
    """Context length on the vertical axis, hops on the horizontal, one annotation per cell."""
    keys = [k for k in matrix.keys() if k.provider == provider and k.mode == mode]
    lengths = sorted({k.context_length for k in keys})
    hops = sorted({k.hops for k in keys})
    grid = np.full((len(lengths), len(hops)), np.nan)
    labels = [["n/a"] * len(hops) for _ in lengths]
    for k in keys:
        i, j = lengths.index(k.context_length), hops.index(k.hops)
        cell = matrix[k]
        if cell.mean is not None:
            grid[i, j] = cell.mean
        labels[i][j] = _fmt(cell.mean)

    with matplotlib.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(hops), 1.0 + 0.55 * len(lengths)))
        cmap = matplotlib.colormaps["RdYlGn"].copy()
        cmap.set_bad("#dddddd")
        ax.imshow(np.ma.masked_invalid(grid), cmap=cmap, vmin=0, vmax=10, aspect="auto")
        for i in range(len(lengths)):
            for j in range(len(hops)):
                ax.text(j, i, labels[i][j], ha="center", va="center", color="black")
        ax.set_xticks(range(len(hops)), [f"{h}-hop" for h in hops])
        ax.set_yticks(range(len(lengths)), [_length_label(n) for n in lengths])
        ax.set_xlabel("Hops")
        ax.set_ylabel("Context length")
        ax.set_title(f"{provider}: {MODE_TITLES.get(mode, mode)}")
        fig.tight_layout()
        _save(fig, Path(path))
    return Path(path)


def _length_label(n: int) -> str:
    return f"{n // 1000}K" if n % 1000 == 0 and n >= 1000 else str(n)


def report(matrix, out_dir: str | Path) -> list[Path]:
    """Write ``scores.csv`` and one heatmap SVG per (provider, mode)."""
    if not len(matrix):
        raise UserError("cannot report an empty matrix")
    out = _ensure_dir(out_dir)
    files = [write_matrix_table(matrix, out / "scores.csv")]
    for provider, mode in matrix.panels():
        files.append(heatmap(matrix, provider, mode, out / f"heatmap_{_safe(provider)}_{_safe(mode)}.svg"))
    return files


def bench_bar_chart(results: Sequence, path: str | Path, categories: Sequence[str]) -> Path:
    """Grouped bars of per-category means, one group per category, one bar per method."""
    with matplotlib.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        width = 0.8 / max(1, len(results))
        x = np.arange(len(categories) + 1)
        for i, res in enumerate(results):
            vals = [res.category_means.get(c) or 0.0 for c in categories] + [res.overall]
            ax.bar(x + i * width, vals, width, label=res.method)
        ax.set_xticks(x + width * (len(results) - 1) / 2, list(categories) + ["Average"])
        ax.set_ylim(0, 5)
        ax.set_ylabel("Mean rating (1-5)")
        ax.legend(fontsize=7, frameon=False)
        fig.tight_layout()
        _save(fig, Path(path))
    return Path(path)
