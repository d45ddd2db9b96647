"""Cross-domain content (CDC) and style (CDS) correlation distillation.

Embeddings and features are batched tensors shaped (N, C, H', W').
Every similarity here compares two domains that differ by exactly one
shift: illumination (S_d/S_n, T_d/T_n) or the dataset (S_d/T_d,
S_n/T_n). S_d is never compared with T_n, nor S_n with T_d.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
from torch import Tensor

from util import ValidationError

log = logging.getLogger('ccdistill.distill')

LAMBDA_JS = 4.0
LAMBDA1 = 2.0
LAMBDA2 = 1.0
LOG_EPS = 1e-12
TINY = 1e-30


@dataclass(frozen=True)
class DistillWeights:
    lambda_js: float = LAMBDA_JS
    lambda1: float = LAMBDA1
    lambda2: float = LAMBDA2

    def __post_init__(self):
        for name in ('lambda_js', 'lambda1', 'lambda2'):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True, eq=False)
class CorrelationMap:
    values: Tensor  # (N, H', W') cosine similarities
    degenerate: int = 0  # positions where a zero column forced 0


@dataclass(frozen=True, eq=False)
class CdcTerms:
    illu: Tensor
    inherent: Tensor
    js: Tensor
    degenerate: int = 0

    @property
    def total(self) -> Tensor:
        return self.illu + self.inherent + self.js


def _same_shape(*ts: Tensor, what: str):
    shapes = {tuple(t.shape) for t in ts}
    if len(shapes) != 1:
        raise ValidationError(f"{what}: shape mismatch {sorted(shapes)}")


def channel_softmax(e: Tensor) -> Tensor:
    return torch.softmax(e, dim=1)


def js_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Mean over positions of the Jensen-Shannon divergence between
    the channel distributions of `p` and `q` (natural log)"""
    _same_shape(p, q, what='js_divergence')
    m = 0.5 * (p + q)
    log_m = torch.log(m + LOG_EPS)
    kl_pm = (p * (torch.log(p + LOG_EPS) - log_m)).sum(dim=1)
    kl_qm = (q * (torch.log(q + LOG_EPS) - log_m)).sum(dim=1)
    return (0.5 * (kl_pm + kl_qm)).mean()


def l_js(e_Sd: Tensor, e_Sn: Tensor, e_Td: Tensor, e_Tn: Tensor,
         lambda_js: float = LAMBDA_JS) -> Tensor:
    """Pull same-content pairs together, keep cross-dataset pairs apart"""
    _same_shape(e_Sd, e_Sn, e_Td, e_Tn, what='l_js')
    p_Sd, p_Sn, p_Td, p_Tn = (channel_softmax(e) for e in (e_Sd, e_Sn, e_Td, e_Tn))
    same = js_divergence(p_Sd, p_Sn) + js_divergence(p_Td, p_Tn)
    cross = js_divergence(p_Sd, p_Td) + js_divergence(p_Sn, p_Tn)
    return lambda_js * same - cross


def cosine_map(a: Tensor, b: Tensor) -> CorrelationMap:
    """Per-position dot product of (upstream l2-normalised) columns"""
    _same_shape(a, b, what='cosine_map')
    values = (a * b).sum(dim=1)
    zero = (a.detach().abs().sum(dim=1) == 0) | (b.detach().abs().sum(dim=1) == 0)
    degenerate = int(zero.sum())
    if degenerate:
        log.debug(f"cosine_map: {degenerate} zero columns")
    return CorrelationMap(values, degenerate)


def cor_illu(e_kd: Tensor, e_kn: Tensor) -> CorrelationMap:
    """Content correlation across illumination within one dataset k"""
    return cosine_map(e_kd, e_kn)


def cor_in(e_Sr: Tensor, e_Tr: Tensor) -> CorrelationMap:
    """Content correlation across datasets at one time of day r"""
    return cosine_map(e_Sr, e_Tr)


def cdc_terms(e_Sd: Tensor, e_Sn: Tensor, e_Td: Tensor, e_Tn: Tensor,
              lambda_js: float = LAMBDA_JS, use_illu: bool = True,
              use_inherent: bool = True, use_js: bool = True,
              stop_grad_source: bool = False) -> CdcTerms:
    _same_shape(e_Sd, e_Sn, e_Td, e_Tn, what='l_cdc')
    zero = e_Sd.new_zeros(())
    illu = inherent = js = zero
    degenerate = 0
    if use_illu:
        c_s, c_t = cor_illu(e_Sd, e_Sn), cor_illu(e_Td, e_Tn)
        guide = c_s.values.detach() if stop_grad_source else c_s.values
        illu = ((guide - c_t.values) ** 2).mean()
        degenerate += c_s.degenerate + c_t.degenerate
    if use_inherent:
        c_d, c_n = cor_in(e_Sd, e_Td), cor_in(e_Sn, e_Tn)
        guide = c_d.values.detach() if stop_grad_source else c_d.values
        inherent = ((guide - c_n.values) ** 2).mean()
        degenerate += c_d.degenerate + c_n.degenerate
    if use_js:
        js = l_js(e_Sd, e_Sn, e_Td, e_Tn, lambda_js)
    return CdcTerms(illu, inherent, js, degenerate)


def l_cdc(e_Sd: Tensor, e_Sn: Tensor, e_Td: Tensor, e_Tn: Tensor,
          lambda_js: float = LAMBDA_JS) -> Tensor:
    return cdc_terms(e_Sd, e_Sn, e_Td, e_Tn, lambda_js).total


def gram(feature: Tensor, normalize: bool = True) -> Tensor:
    """(N, C, H', W') -> (N, C, C) channel inner products, divided by
    C*H'*W' unless `normalize` is off"""
    if feature.ndim != 4 or feature.shape[1] < 1:
        raise ValidationError(f"gram needs an (N, C, H, W) feature, got {tuple(feature.shape)}")
    n, c, h, w = feature.shape
    f = feature.reshape(n, c, h * w)
    g = f @ f.transpose(1, 2)
    return g / (c * h * w) if normalize else g


def cor_gram(g_kd: Tensor, g_kn: Tensor) -> tuple[Tensor, int]:
    """Cosine of the flattened Gram matrices, one value per sample;
    returns (values, count of zero-matrix pairs forced to 0)"""
    if g_kd.shape != g_kn.shape:
        raise ValidationError(
            f"cor_gram: dimension mismatch {tuple(g_kd.shape)} vs {tuple(g_kn.shape)}")
    a = g_kd.reshape(g_kd.shape[0], -1)
    b = g_kn.reshape(g_kn.shape[0], -1)
    sq = (a * a).sum(dim=1) * (b * b).sum(dim=1)
    zero = sq <= TINY
    cos = (a * b).sum(dim=1) / torch.sqrt(torch.clamp(sq, min=TINY))
    degenerate = int(zero.sum())
    if degenerate:
        log.debug(f"cor_gram: {degenerate} zero Gram matrices")
    return torch.where(zero, torch.zeros_like(cos), cos), degenerate


def l_cds(F_Sd: Tensor, F_Sn: Tensor, F_Td: Tensor, F_Tn: Tensor) -> Tensor:
    """Squared difference of the day/night style correlation of S and
    of T. Cross-dataset Gram pairs are never used."""
    channels = {f.shape[1] for f in (F_Sd, F_Sn, F_Td, F_Tn)}
    if len(channels) != 1:
        raise ValidationError(f"l_cds: channel mismatch {sorted(channels)}")
    cor_s, _ = cor_gram(gram(F_Sd), gram(F_Sn))
    cor_t, _ = cor_gram(gram(F_Td), gram(F_Tn))
    return ((cor_s - cor_t) ** 2).mean()
