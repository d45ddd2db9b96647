"""Supervised losses, the thresholded static pseudo-label loss and the
total training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
from torch import Tensor

from distill import DistillWeights
from imagecore import LabelMap, IGNORE_INDEX
from util import ValidationError

TAU = 0.9
FREQ_OFFSET = 1.02


class NonFiniteLoss(RuntimeError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component!r} is not finite ({value})")
        self.component = component


@dataclass(frozen=True)
class ClassWeights:
    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if not w or not all(math.isfinite(v) and v >= 0 for v in w):
            raise ValidationError(f"class weights must be finite and >= 0, got {w}")
        if not any(v > 0 for v in w):
            raise ValidationError("at least one class weight must be > 0")
        object.__setattr__(self, 'weights', w)

    @classmethod
    def uniform(cls, num_classes: int) -> ClassWeights:
        return cls((1.0,) * num_classes)

    @classmethod
    def from_frequencies(cls, freq: Sequence[float]) -> ClassWeights:
        """Inverse-log frequency, w_c = 1 / ln(1.02 + f_c)"""
        return cls(tuple(1.0 / math.log(FREQ_OFFSET + float(f)) for f in freq))

    def as_tensor(self) -> Tensor:
        return torch.tensor(self.weights, dtype=torch.float64)


@dataclass(frozen=True)
class StaticClassSet:
    classes: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        classes = tuple(sorted(set(int(c) for c in self.classes)))
        if any(not 0 <= c < self.num_classes for c in classes):
            raise ValidationError(
                f"static classes {classes} not a subset of [0, {self.num_classes})")
        object.__setattr__(self, 'classes', classes)


@dataclass(frozen=True, eq=False)
class LossComponents:
    seg_n: Tensor
    seg_d: Tensor
    pseudo: Tensor
    cdc: Tensor
    cds: Tensor

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def as_floats(self) -> dict[str, float]:
        return {k: v.detach().item() for k, v in self.items()}


def labels_to_tensor(labels: Iterable[LabelMap]) -> Tensor:
    return torch.from_numpy(np.stack([lb.classes for lb in labels]))


def weighted_ce_counted(logits: Tensor, labels: Tensor, w: ClassWeights,
                        ignore_index: int = IGNORE_INDEX) -> tuple[Tensor, int]:
    """(loss, number of non-ignored pixels); the loss is 0 when that is 0"""
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ValidationError(
            f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    if len(w.weights) != logits.shape[1]:
        raise ValidationError(f"{len(w.weights)} class weights for {logits.shape[1]} classes")
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        return logits.sum() * 0.0, 0
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    logp = torch.log_softmax(logits, dim=1)
    nll = -logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    weight = w.as_tensor().to(logits.dtype)[safe]
    return (weight * nll * valid).sum() / n_valid, n_valid


def weighted_ce(logits: Tensor, labels: Tensor, w: ClassWeights,
                ignore_index: int = IGNORE_INDEX) -> Tensor:
    return weighted_ce_counted(logits, labels, w, ignore_index)[0]


@torch.no_grad()
def static_pseudo_labels(logits_td: Tensor, statics: StaticClassSet, tau: float = TAU,
                         ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Argmax of the day prediction where it is a static class with
    softmax confidence >= tau, `ignore_index` everywhere else"""
    if not 0 <= tau <= 1:
        raise ValidationError(f"tau must be in [0, 1], got {tau}")
    conf, arg = torch.softmax(logits_td.detach(), dim=1).max(dim=1)
    static = torch.isin(arg, torch.tensor(statics.classes, dtype=arg.dtype))
    keep = static & (conf >= tau)
    return torch.where(keep, arg, torch.full_like(arg, ignore_index))


def l_pseudo(logits_tn: Tensor, pseudo: Tensor, w: ClassWeights,
             ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Night logits supervised by day-derived pseudo labels"""
    return weighted_ce(logits_tn, pseudo, w, ignore_index)


def check_finite(components: LossComponents):
    for name, v in components.items():
        if not bool(torch.isfinite(v).all()):
            raise NonFiniteLoss(name, v.detach().item())


def total_loss(components: LossComponents, weights: DistillWeights) -> Tensor:
    check_finite(components)
    c = components
    return (c.seg_n + c.seg_d + c.pseudo
            + weights.lambda1 * c.cdc + weights.lambda2 * c.cds)
