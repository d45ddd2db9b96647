"""Image containers, label maps and the sRGB <-> CIELAB conversion
used for holistic LAB style translation.

Colour convention: sRGB primaries, D65 reference white, standard
piecewise gamma. Every function here is pure; `Image` pixels are
stored as read-only float64 arrays.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from util import ValidationError

log = logging.getLogger('ccdistill.imagecore')

# linear sRGB -> XYZ (D65)
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)
# white is whatever (1, 1, 1) maps to so that white <-> L=100 is exact
WHITE_D65 = SRGB_TO_XYZ.sum(axis=1)

_DELTA = 6 / 29
MATCH_EPS = 1e-6
RANGE_TOL = 1e-6
IGNORE_INDEX = 255


class ColorSpace(enum.Enum):
    SRGB = 'srgb'
    LAB = 'lab'


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Image:
    pixels: np.ndarray
    colorspace: ColorSpace = ColorSpace.SRGB

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"Image pixels must be HxWx3, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValidationError(f"Image must be at least 1x1, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)):
            raise ValidationError("Image pixels must be finite")
        if self.colorspace is ColorSpace.SRGB:
            _check_range(px, np.zeros(3), np.ones(3), 'sRGB')
            np.clip(px, 0.0, 1.0, out=px)
        else:
            _check_range(px, np.array([0., -128., -128.]),
                         np.array([100., 127., 127.]), 'LAB')
        object.__setattr__(self, 'pixels', _readonly(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> Image:
        """8-bit RGB -> float image via v/255"""
        return cls(np.asarray(arr, dtype=np.float64)[..., :3] / 255.0)

    def to_uint8(self) -> np.ndarray:
        if self.colorspace is not ColorSpace.SRGB:
            raise ValidationError("only sRGB images have an 8-bit form")
        return np.rint(self.pixels * 255.0).astype(np.uint8)


def _check_range(px: np.ndarray, low: np.ndarray, high: np.ndarray, what: str):
    if np.any(px < low - RANGE_TOL) or np.any(px > high + RANGE_TOL):
        raise ValidationError(
            f"{what} values out of range: min {px.reshape(-1, 3).min(0)},"
            f" max {px.reshape(-1, 3).max(0)}")


@dataclass(frozen=True, eq=False)
class LabelMap:
    classes: np.ndarray
    num_classes: int
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be positive, got {self.num_classes}")
        if 0 <= self.ignore_index < self.num_classes:
            raise ValidationError(
                f"ignore_index {self.ignore_index} collides with a class index")
        c = np.array(self.classes, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ValidationError(f"LabelMap must be HxW, got shape {c.shape}")
        valid = ((c >= 0) & (c < self.num_classes)) | (c == self.ignore_index)
        if not np.all(valid):
            raise ValidationError(
                f"LabelMap entries must be in [0, {self.num_classes}) or"
                f" {self.ignore_index}")
        object.__setattr__(self, 'classes', _readonly(c))

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape[0], self.classes.shape[1]

    def with_classes(self, classes: np.ndarray) -> LabelMap:
        return LabelMap(classes, self.num_classes, self.ignore_index)


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        mean = tuple(float(v) for v in self.mean)
        std = tuple(float(v) for v in self.std)
        if len(mean) != 3 or len(std) != 3:
            raise ValidationError("ChannelStats needs exactly 3 means and 3 stds")
        if not all(np.isfinite(mean + std)):
            raise ValidationError("ChannelStats must be finite")
        if any(s < 0 for s in std):
            raise ValidationError(f"std must be non-negative, got {std}")
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'std', std)

    @classmethod
    def of_pixels(cls, lab: np.ndarray) -> ChannelStats:
        flat = np.asarray(lab, dtype=np.float64).reshape(-1, 3)
        return cls(tuple(flat.mean(axis=0)), tuple(flat.std(axis=0)))

    def to_dict(self) -> dict:
        return {'mean': list(self.mean), 'std': list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> ChannelStats:
        return cls(tuple(d['mean']), tuple(d['std']))


@dataclass(frozen=True, eq=False)
class MomentMatch:
    image: Image
    # LAB result before the gamut clamp; may leave the LAB ranges
    matched_lab: np.ndarray = field(repr=False)
    clamp_fraction: float


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92,
                    ((np.maximum(c, 0.04045) + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.0031308, c * 12.92,
                    1.055 * np.maximum(c, 0.0031308) ** (1 / 2.4) - 0.055)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4 / 29)


def _f_inv(f: np.ndarray) -> np.ndarray:
    return np.where(f > _DELTA, f ** 3, 3 * _DELTA ** 2 * (f - 4 / 29))


def srgb_array_to_lab(rgb: np.ndarray) -> np.ndarray:
    """(..., 3) sRGB in [0, 1] -> (..., 3) LAB, no validation"""
    xyz = _srgb_to_linear(rgb) @ SRGB_TO_XYZ.T
    fx, fy, fz = np.moveaxis(_f(xyz / WHITE_D65), -1, 0)
    return np.stack([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)], axis=-1)


def lab_array_to_srgb(lab: np.ndarray) -> tuple[np.ndarray, int]:
    """(..., 3) LAB -> (sRGB clamped to [0, 1], number of clamped values)"""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    xyz = _f_inv(np.stack([fx, fy, fz], axis=-1)) * WHITE_D65
    linear = xyz @ XYZ_TO_SRGB.T
    # tolerate round-off at the gamut boundary
    n_clamped = int(np.count_nonzero((linear < -1e-12) | (linear > 1 + 1e-12)))
    return _linear_to_srgb(np.clip(linear, 0.0, 1.0)), n_clamped


def rgb_to_lab(img: Image) -> Image:
    if img.colorspace is not ColorSpace.SRGB:
        raise ValidationError(f"rgb_to_lab needs an sRGB image, got {img.colorspace}")
    return Image(srgb_array_to_lab(img.pixels), ColorSpace.LAB)


def lab_to_rgb_clamped(img: Image) -> tuple[Image, int]:
    if img.colorspace is not ColorSpace.LAB:
        raise ValidationError(f"lab_to_rgb needs a LAB image, got {img.colorspace}")
    rgb, n_clamped = lab_array_to_srgb(img.pixels)
    if n_clamped:
        log.debug(f"lab_to_rgb clamped {n_clamped} out-of-gamut values")
    return Image(rgb), n_clamped


def lab_to_rgb(img: Image) -> Image:
    return lab_to_rgb_clamped(img)[0]


def channel_stats(img: Image) -> ChannelStats:
    if img.colorspace is not ColorSpace.LAB:
        raise ValidationError("channel_stats is defined on LAB images")
    return ChannelStats.of_pixels(img.pixels)


def pooled_stats(images: Iterable[Image]) -> ChannelStats:
    """Aggregate LAB stats over every pixel of `images` (sRGB or LAB)"""
    labs = [im.pixels if im.colorspace is ColorSpace.LAB else srgb_array_to_lab(im.pixels)
            for im in images]
    if not labs:
        raise ValidationError("pooled_stats needs at least one image")
    return ChannelStats.of_pixels(np.concatenate([a.reshape(-1, 3) for a in labs]))


def lab_moment_match_report(src: Image, target_stats: ChannelStats,
                            source_stats: ChannelStats | None = None) -> MomentMatch:
    """`source_stats` replaces the image's own stats, so a set of images
    can share one affine map"""
    if src.colorspace is not ColorSpace.SRGB:
        raise ValidationError("lab_moment_match needs an sRGB source")
    lab = srgb_array_to_lab(src.pixels)
    if source_stats is None:
        mu = lab.mean(axis=(0, 1))
        sd = lab.std(axis=(0, 1))
    else:
        mu = np.asarray(source_stats.mean)
        sd = np.asarray(source_stats.std)
    t_mu = np.asarray(target_stats.mean)
    t_sd = np.asarray(target_stats.std)
    matched = (lab - mu) * (t_sd / np.maximum(sd, MATCH_EPS)) + t_mu
    rgb, n_clamped = lab_array_to_srgb(matched)
    return MomentMatch(Image(rgb), _readonly(matched), n_clamped / rgb.size)


def lab_moment_match(src: Image, target_stats: ChannelStats) -> Image:
    return lab_moment_match_report(src, target_stats).image


def moment_match_all(sources: Sequence[Image], target_stats: ChannelStats
                     ) -> list[MomentMatch]:
    return [lab_moment_match_report(s, target_stats) for s in sources]
