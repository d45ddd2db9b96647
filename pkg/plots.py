"""Static PNG line plots for training runs and the ablation sweep"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from evalkit import RunResult  # noqa: E402

COMPONENTS = ('seg_n', 'seg_d', 'pseudo', 'cdc', 'cds', 'total')
# road, sky, building, vegetation, sidewalk, person, rider, car
CLASS_COLORS = ((128, 64, 128), (70, 130, 180), (70, 70, 70), (107, 142, 35),
                (244, 35, 232), (220, 20, 60), (255, 0, 0), (0, 0, 142))


def class_colors(num_classes: int) -> list[tuple[int, int, int]]:
    """8-bit RGB per class for prediction maps; tab20 past the fixed ones"""
    cmap = plt.get_cmap('tab20')
    extra = [tuple(int(round(255 * c)) for c in cmap(i % 20)[:3])
             for i in range(max(0, num_classes - len(CLASS_COLORS)))]
    return (list(CLASS_COLORS) + extra)[:num_classes]


def plot_loss_components(records: Sequence[dict], path: str | Path,
                         title: str = 'loss components') -> Path:
    fig, ax = plt.subplots(figsize=(8, 4.5))
    iters = [r['iter'] for r in records]
    for comp in COMPONENTS:
        values = [r.get(comp, np.nan) for r in records]
        if any(v != 0 for v in values):
            ax.plot(iters, values, label=comp, linewidth=1)
    ax.set_xlabel('iteration')
    ax.set_ylabel('loss')
    ax.set_title(title)
    ax.legend(loc='upper right')
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_variant_miou(results: Sequence[RunResult], path: str | Path) -> Path:
    """Validation mIoU against iteration, one line per variant
    (mean over its seeds)"""
    by_variant: dict[str, list[RunResult]] = {}
    for r in results:
        by_variant.setdefault(r.variant, []).append(r)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for label, group in by_variant.items():
        curves = [{m['iter'] + 1: m['val_miou'] for m in r.metrics if 'val_miou' in m}
                  for r in group]
        iters = sorted(set.intersection(*(set(c) for c in curves))) if curves else []
        if not iters:
            continue
        mean = [100 * np.mean([c[i] for c in curves]) for i in iters]
        ax.plot(iters, mean, marker='o', markersize=3, label=label, linewidth=1)
    ax.set_xlabel('iteration')
    ax.set_ylabel('night mIoU')
    ax.set_title('validation mIoU per variant')
    ax.legend(loc='lower right', fontsize='small')
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
