"""Segmentation scoring and the ablation report.

Confusion matrices have truth on the rows and prediction on the columns.
Classes that never occur (zero union) are absent: their IoU is NaN and
they do not count towards the mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from imagecore import LabelMap
from util import ValidationError

ABLATION_ROWS = (
    'ours',
    'w/o CDC',
    'w/o project head',
    'w/o L_JS',
    'w/o illu-corr',
    'w/o inherent-corr',
    'w/o CDS',
    'w/o LAB trans',
    'w/o CDC and CDS',
    'baseline',
)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 1:
            raise ValidationError(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise ValidationError("confusion counts must be >= 0")
        object.__setattr__(self, 'counts', c)

    @classmethod
    def zeros(cls, num_classes: int) -> ConfusionMatrix:
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ValidationError(
                f"cannot add {self.num_classes}- and {other.num_classes}-class matrices")
        return ConfusionMatrix(self.counts + other.counts)


@dataclass(frozen=True, eq=False)
class ClassIoU:
    values: np.ndarray  # NaN where absent

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def to_list(self) -> list[float | None]:
        return [None if math.isnan(v) else float(v) for v in self.values]


def _classes_of(x: LabelMap | np.ndarray) -> np.ndarray:
    return x.classes if isinstance(x, LabelMap) else np.asarray(x)


def confusion(pred: LabelMap | np.ndarray, truth: LabelMap,
              num_classes: int | None = None) -> ConfusionMatrix:
    """Pixel counts over every position whose truth is not ignored"""
    p, t = _classes_of(pred), truth.classes
    if p.shape != t.shape:
        raise ValidationError(f"prediction {p.shape} and truth {t.shape} shapes differ")
    k = num_classes or truth.num_classes
    valid = t != truth.ignore_index
    p, t = p[valid].astype(np.int64), t[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= k):
        raise ValidationError(f"predicted classes must be in [0, {k})")
    counts = np.bincount(k * t + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts)


def score(preds: Iterable[LabelMap | np.ndarray], truths: Iterable[LabelMap],
          num_classes: int) -> ConfusionMatrix:
    cm = ConfusionMatrix.zeros(num_classes)
    for p, t in zip(preds, truths, strict=True):
        cm = cm + confusion(p, t, num_classes)
    return cm


def per_class_iou(cm: ConfusionMatrix) -> ClassIoU:
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    with np.errstate(invalid='ignore', divide='ignore'):
        iou = np.where(union > 0, tp / union, np.nan)
    return ClassIoU(iou)


def miou(per_class: ClassIoU) -> float:
    present = per_class.values[per_class.present]
    if present.size == 0:
        raise ValidationError("mIoU is undefined when no class is present")
    return float(present.mean())


def format_iou_table(per_class: ClassIoU, class_names: Sequence[str] | None = None) -> str:
    names = list(class_names or (f'class_{i}' for i in range(len(per_class.values))))
    width = max(len(n) for n in names + ['mIoU'])
    lines = []
    for name, v in zip(names, per_class.values):
        lines.append(f"{name:<{width}}  {'absent' if math.isnan(v) else f'{100 * v:6.2f}'}")
    lines.append(f"{'mIoU':<{width}}  {100 * miou(per_class):6.2f}")
    return '\n'.join(lines)


@dataclass
class RunResult:
    """One finished training run as the ablation report sees it"""
    variant: str
    seed: int
    final_miou: float
    miou_alt: float | None = None
    metrics: list[dict] = field(default_factory=list)
    out_dir: str | None = None

    def to_dict(self, with_metrics=False) -> dict:
        d = {'variant': self.variant, 'seed': self.seed, 'final_miou': self.final_miou,
             'miou_alt': self.miou_alt, 'out_dir': self.out_dir}
        if with_metrics:
            d['metrics'] = self.metrics
        return d


@dataclass(frozen=True)
class ReportRow:
    label: str
    seeds: tuple[int, ...]
    mean: float
    std: float
    alt_mean: float | None = None
    alt_std: float | None = None


@dataclass(frozen=True)
class AblationTable:
    rows: tuple[ReportRow, ...]

    def row(self, label: str) -> ReportRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {'rows': [{'label': r.label, 'seeds': list(r.seeds), 'miou_mean': r.mean,
                          'miou_std': r.std, 'miou_alt_mean': r.alt_mean,
                          'miou_alt_std': r.alt_std} for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def report(runs: Sequence[RunResult], order: Sequence[str] = ABLATION_ROWS) -> AblationTable:
    """One row per variant, mean and (population) std of the final mIoU
    over seeds. Known labels come in `order`, anything else after them."""
    if not runs:
        raise ValidationError("report needs at least one completed run")
    by_variant: dict[str, list[RunResult]] = {}
    for r in runs:
        by_variant.setdefault(r.variant, []).append(r)
    labels = [v for v in order if v in by_variant]
    labels += [v for v in by_variant if v not in labels]
    rows = []
    for label in labels:
        group = sorted(by_variant[label], key=lambda r: r.seed)
        mean, std = _mean_std([r.final_miou for r in group])
        alt = [r.miou_alt for r in group if r.miou_alt is not None]
        alt_mean, alt_std = _mean_std(alt) if alt else (None, None)
        rows.append(ReportRow(label, tuple(r.seed for r in group), mean, std, alt_mean, alt_std))
    return AblationTable(tuple(rows))


def format_report(table: AblationTable) -> str:
    """Aligned text table, mIoU in points"""
    has_alt = any(r.alt_mean is not None for r in table.rows)
    width = max(len('variant'), *(len(r.label) for r in table.rows))
    header = f"{'variant':<{width}}  {'seeds':>5}  {'mIoU':>14}"
    if has_alt:
        header += f"  {'mIoU (alt)':>14}"
    lines = [header, '-' * len(header)]
    for r in table.rows:
        line = f"{r.label:<{width}}  {len(r.seeds):>5}  {f'{100 * r.mean:.2f} ± {100 * r.std:.2f}':>14}"
        if has_alt:
            alt = '-' if r.alt_mean is None else f'{100 * r.alt_mean:.2f} ± {100 * r.alt_std:.2f}'
            line += f"  {alt:>14}"
        lines.append(line)
    return '\n'.join(lines)
