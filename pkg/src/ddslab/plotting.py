"""Matplotlib rendering for experiment CSVs, image grids and heatmaps (Agg backend, files only)."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ddslab.synthdata import to_uint8  # noqa: E402


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_csv(path: str | Path, rows: list[dict]) -> Path:
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    fields = list(rows[0])
    for row in rows[1:]:
        fields += [k for k in row if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return v


def _grouped(rows, group):
    out = defaultdict(list)
    for r in rows:
        out[r.get(group, "") if group else ""].append(r)
    return out


def plot_lines(rows, path, x, y, err=None, group=None, title="", xlabel=None, ylabel=None, logx=False):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, rs in _grouped(rows, group).items():
        xs = np.array([_num(r[x]) for r in rs], float)
        ys = np.array([_num(r[y]) for r in rs], float)
        order = np.argsort(xs)
        xs, ys = xs[order], ys[order]
        ax.plot(xs, ys, marker="o", label=str(name) if group else None)
        if err:
            es = np.array([_num(r[err]) for r in rs], float)[order]
            ax.fill_between(xs, ys - es, ys + es, alpha=0.25)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel or x)
    ax.set_ylabel(ylabel or y)
    ax.set_title(title)
    if group:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_scatter(rows, path, x, y, group=None, title="", xlabel=None, ylabel=None):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, rs in _grouped(rows, group).items():
        ax.scatter([_num(r[x]) for r in rs], [_num(r[y]) for r in rs], s=14, label=str(name) if group else None)
    ax.set_xlabel(xlabel or x)
    ax.set_ylabel(ylabel or y)
    ax.set_title(title)
    if group:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_bars(rows, path, x, y, group=None, title="", xlabel=None, ylabel=None):
    groups = _grouped(rows, group)
    cats = sorted({str(r[x]) for r in rows}, key=lambda c: _num(c) if isinstance(_num(c), float) else 0)
    width = 0.8 / max(1, len(groups))
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for k, (name, rs) in enumerate(groups.items()):
        vals = {str(r[x]): _num(r[y]) for r in rs}
        ax.bar(np.arange(len(cats)) + k * width, [vals.get(c, np.nan) for c in cats], width,
               label=str(name) if group else None)
    ax.set_xticks(np.arange(len(cats)) + width * (len(groups) - 1) / 2)
    ax.set_xticklabels(cats)
    ax.set_xlabel(xlabel or x)
    ax.set_ylabel(ylabel or y)
    ax.set_title(title)
    if group:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


KINDS = {"lines": plot_lines, "scatter": plot_scatter, "bars": plot_bars}


def render_figure(run_dir: str | Path, spec: dict) -> Path:
    """Draw one declared figure: ``{"kind", "table", "file", **plot kwargs}``."""
    run_dir = Path(run_dir)
    spec = dict(spec)
    kind, table, file = spec.pop("kind"), spec.pop("table"), spec.pop("file")
    rows = read_csv(run_dir / f"{table}.csv")
    return KINDS[kind](rows, run_dir / file, **spec)


def image_grid(images, path, labels=None, cols: int | None = None, scale: int = 4) -> Path:
    """Rows of (H, W, C) images in [-1, 1], nearest-upscaled; ``images`` is a list of lists."""
    rows = [list(r) for r in images]
    ncol = cols or max(len(r) for r in rows)
    fig, axes = plt.subplots(len(rows), ncol, figsize=(ncol * 1.2, len(rows) * 1.2 + 0.2), squeeze=False)
    for i, r in enumerate(rows):
        for j in range(ncol):
            ax = axes[i][j]
            ax.axis("off")
            if j < len(r) and r[j] is not None:
                ax.imshow(to_uint8(np.clip(r[j], -1, 1)), interpolation="nearest")
                if labels and i == 0 and j < len(labels):
                    ax.set_title(labels[j], fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def heatmap(arr, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(3, 3))
    im = ax.imshow(np.asarray(arr), cmap="magma", interpolation="nearest")
    ax.axis("off")
    ax.set_title(title, fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
