"""Procedural four-domain world: labelled source scenes in one urban
style, unlabelled target day/night pairs in another.

Both domain shifts are factored out explicitly. S_d and T_d share a
scene and a texture seed and only differ by `StyleSpec`; T_d and T_n
only differ by the `NightSpec` and a parallax roll. The target-night
labels exist for scoring and only leave this module through
`SyntheticWorld.eval_split` / `load_eval_split`.
"""

from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

import pg_util
from imagecore import (Image, LabelMap, IGNORE_INDEX, lab_moment_match_report,
                       pooled_stats)
from util import ValidationError, derive_seed, uniform_from_mean

HEIGHT = 64
WIDTH = 64
NUM_CLASSES = 8
SHAPE_COUNT = 6
STATIC_CLASSES = (0, 1, 2, 3, 4)
CLASS_NAMES = ('road', 'sky', 'building', 'vegetation', 'sidewalk',
               'person', 'rider', 'car')
GROUND_CLASS = 0
SKY_CLASS = 1
BACKDROP_CLASS = 2


class DomainTag(enum.Enum):
    S_d = 'S_d'
    S_n = 'S_n'
    T_d = 'T_d'
    T_n = 'T_n'

    @property
    def labeled(self) -> bool:
        return self in (DomainTag.S_d, DomainTag.S_n)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = HEIGHT
    width: int = WIDTH
    num_classes: int = NUM_CLASSES
    shape_count: int = SHAPE_COUNT

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValidationError(f"scene must be at least 1x1, got {self.height}x{self.width}")
        if self.shape_count < 1:
            raise ValidationError(f"shape_count must be >= 1, got {self.shape_count}")


@dataclass(frozen=True)
class StyleSpec:
    palette: tuple[tuple[float, float, float], ...]
    tone_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    texture_gain: float = 0.03

    def __post_init__(self):
        palette = tuple(tuple(float(v) for v in c) for c in self.palette)
        if any(len(c) != 3 or min(c) < 0 or max(c) > 1 for c in palette):
            raise ValidationError("palette entries must be RGB triples in [0, 1]")
        if len(self.tone_shift) != 3:
            raise ValidationError("tone_shift needs 3 values")
        if self.texture_gain < 0:
            raise ValidationError(f"texture_gain must be >= 0, got {self.texture_gain}")
        object.__setattr__(self, 'palette', palette)
        object.__setattr__(self, 'tone_shift', tuple(float(v) for v in self.tone_shift))

    @property
    def num_classes(self) -> int:
        return len(self.palette)

    @classmethod
    def from_dict(cls, d: dict) -> StyleSpec:
        return cls(tuple(tuple(c) for c in d['palette']),
                   tuple(d.get('tone_shift', (0.0, 0.0, 0.0))),
                   d.get('texture_gain', 0.03))


@dataclass(frozen=True)
class LightSource:
    position: tuple[float, float]  # (row, col)
    radius: float
    intensity: float


@dataclass(frozen=True)
class NightSpec:
    gain: float = 0.3
    gamma: float = 1.6
    light_sources: tuple[LightSource, ...] = ()
    noise_std: float = 0.02

    def __post_init__(self):
        if not 0 < self.gain <= 1:
            raise ValidationError(f"night gain must be in (0, 1], got {self.gain}")
        if self.gamma < 1:
            raise ValidationError(f"night gamma must be >= 1, got {self.gamma}")
        if self.noise_std < 0:
            raise ValidationError(f"noise_std must be >= 0, got {self.noise_std}")
        lights = tuple(ls if isinstance(ls, LightSource) else LightSource(
            tuple(ls['position']), ls['radius'], ls['intensity']) for ls in self.light_sources)
        object.__setattr__(self, 'light_sources', lights)

    def with_random_lights(self, n: int, height: int, width: int,
                           rng: random.Random) -> NightSpec:
        extra = tuple(LightSource((rng.uniform(0, height - 1), rng.uniform(0, width - 1)),
                                  uniform_from_mean(0.08 * min(height, width), 1.5, rng),
                                  rng.uniform(0.6, 1.0))
                      for _ in range(n))
        return replace(self, light_sources=self.light_sources + extra)

    @classmethod
    def from_dict(cls, d: dict) -> NightSpec:
        return cls(d.get('gain', 0.3), d.get('gamma', 1.6),
                   tuple(d.get('light_sources', ())), d.get('noise_std', 0.02))


@dataclass(frozen=True, eq=False)
class DomainSample:
    image: Image
    label: LabelMap | None
    domain_tag: DomainTag

    def __post_init__(self):
        if (self.label is not None) != self.domain_tag.labeled:
            raise ValidationError(
                f"{self.domain_tag.value} samples must "
                f"{'carry' if self.domain_tag.labeled else 'not carry'} a label")


@dataclass(frozen=True, eq=False)
class QuadBatch:
    s_d: tuple[DomainSample, ...]
    s_n: tuple[DomainSample, ...]
    t_d: tuple[DomainSample, ...]
    t_n: tuple[DomainSample, ...]
    parallax: tuple[tuple[int, int], ...]
    lab_clamp_fraction: float = 0.0
    # S_n in LAB before the gamut clamp, empty without LAB init
    s_n_lab: tuple[np.ndarray, ...] = field(default=(), repr=False)

    def __post_init__(self):
        sizes = {len(self.s_d), len(self.s_n), len(self.t_d), len(self.t_n), len(self.parallax)}
        if len(sizes) != 1:
            raise ValidationError(f"QuadBatch domains must have equal sizes, got {sizes}")

    def __len__(self):
        return len(self.s_d)


@dataclass(frozen=True, eq=False)
class EvalSplit:
    """Night images with their hidden labels, for scoring only"""
    images: tuple[Image, ...]
    labels: tuple[LabelMap, ...]

    def __len__(self):
        return len(self.images)


SOURCE_STYLE = StyleSpec(
    palette=((0.50, 0.50, 0.52), (0.55, 0.75, 0.95), (0.60, 0.45, 0.40),
             (0.30, 0.60, 0.25), (0.75, 0.70, 0.65), (0.85, 0.25, 0.30),
             (0.90, 0.60, 0.15), (0.20, 0.30, 0.80)),
    tone_shift=(0.0, 0.0, 0.0), texture_gain=0.03)
TARGET_STYLE = StyleSpec(
    palette=((0.42, 0.44, 0.40), (0.70, 0.78, 0.85), (0.70, 0.62, 0.50),
             (0.35, 0.50, 0.20), (0.62, 0.62, 0.60), (0.70, 0.30, 0.45),
             (0.80, 0.50, 0.25), (0.35, 0.35, 0.70)),
    tone_shift=(0.03, 0.0, -0.04), texture_gain=0.04)
TARGET_NIGHT = NightSpec(gain=0.3, gamma=1.6, noise_std=0.02)


@dataclass
class WorldConfig:
    height: int = HEIGHT
    width: int = WIDTH
    num_classes: int = NUM_CLASSES
    shape_count: int = SHAPE_COUNT
    static_classes: tuple[int, ...] = STATIC_CLASSES
    class_names: tuple[str, ...] = CLASS_NAMES
    style_source: StyleSpec = SOURCE_STYLE
    style_target: StyleSpec = TARGET_STYLE
    night: NightSpec = TARGET_NIGHT
    lights_per_image: int = 2
    parallax_max: int = 2
    use_lab_init: bool = True
    lab_target: str = 'batch'
    train_images: int = 200
    eval_images: int = 32
    alt_style: StyleSpec | None = None
    alt_night: NightSpec | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        for style in (self.style_source, self.style_target, self.alt_style):
            if style is not None and style.num_classes != self.num_classes:
                raise ValidationError(
                    f"palette has {style.num_classes} entries, expected {self.num_classes}")
        if any(not 0 <= c < self.num_classes for c in self.static_classes):
            raise ValidationError(f"static classes {self.static_classes} out of range")
        if len(self.class_names) != self.num_classes:
            raise ValidationError(
                f"{len(self.class_names)} class names given, expected {self.num_classes}")
        self.class_names = tuple(self.class_names)
        if self.lab_target not in ('batch', 'per_image'):
            raise ValidationError(f"lab_target must be 'batch' or 'per_image', got {self.lab_target!r}")
        if self.parallax_max < 0 or self.lights_per_image < 0:
            raise ValidationError("parallax_max and lights_per_image must be >= 0")
        if (self.alt_style is None) != (self.alt_night is None):
            raise ValidationError("alt_style and alt_night must be given together")

    @property
    def has_alt(self) -> bool:
        return self.alt_style is not None

    def scene_spec(self, seed: int) -> SceneSpec:
        return SceneSpec(seed, self.height, self.width, self.num_classes, self.shape_count)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> WorldConfig:
        d = dict(d)
        for k in ('style_source', 'style_target', 'alt_style'):
            if isinstance(d.get(k), dict):
                d[k] = StyleSpec.from_dict(d[k])
        for k in ('night', 'alt_night'):
            if isinstance(d.get(k), dict):
                d[k] = NightSpec.from_dict(d[k])
        for k in ('static_classes', 'class_names'):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def generate_scene(spec: SceneSpec) -> LabelMap:
    """Layered label map: backdrop, sky band, ground band, then random
    rectangles and discs of random classes on top"""
    if spec.num_classes < 2:
        raise ValidationError(f"num_classes must be >= 2, got {spec.num_classes}")
    n = spec.num_classes
    h, w = spec.height, spec.width
    rng = random.Random(spec.seed)
    surf = pg_util.index_surface(h, w, fill=BACKDROP_CLASS % n)
    sky_bottom = round(uniform_from_mean(0.3 * h, 0.08 * h, rng))
    ground_top = round(uniform_from_mean(0.65 * h, 0.08 * h, rng))
    pg_util.draw_rect(surf, SKY_CLASS % n, (w / 2, sky_bottom / 2), (w, sky_bottom))
    pg_util.draw_rect(surf, GROUND_CLASS, (w / 2, (ground_top + h) / 2), (w, h - ground_top))
    for _ in range(spec.shape_count):
        cls = rng.randrange(n)
        center = (rng.uniform(0, w - 1), rng.uniform(0, h - 1))
        if rng.random() < 0.5:
            size = (uniform_from_mean(0.2 * w, 0.1 * w, rng),
                    uniform_from_mean(0.2 * h, 0.1 * h, rng))
            pg_util.draw_rect(surf, cls, center, size)
        else:
            pg_util.draw_disc(surf, cls, center,
                              uniform_from_mean(0.1 * min(h, w), 0.05 * min(h, w), rng))
    return LabelMap(pg_util.indices_from_surface(surf), n)


def _paint(label: LabelMap, style: StyleSpec, rng: np.random.Generator) -> np.ndarray:
    if style.num_classes != label.num_classes:
        raise ValidationError(
            f"style has {style.num_classes} colours for {label.num_classes} classes")
    palette = np.array(style.palette + ((0.0, 0.0, 0.0),))
    idx = np.where(label.classes == label.ignore_index, label.num_classes, label.classes)
    texture = rng.normal(0.0, 1.0, label.shape + (1,)) * style.texture_gain
    return np.clip(palette[idx] + np.asarray(style.tone_shift) + texture, 0.0, 1.0)


def light_profile(light: LightSource, height: int, width: int) -> np.ndarray:
    """Saturated core inside `radius`, Gaussian shoulder outside it"""
    rows, cols = np.mgrid[0:height, 0:width]
    d = np.hypot(rows - light.position[0], cols - light.position[1])
    sigma = max(light.radius / 2, 0.5)
    shoulder = np.exp(-np.maximum(d - light.radius, 0.0) ** 2 / (2 * sigma ** 2))
    return light.intensity * np.where(d <= light.radius, 1.0, shoulder)


def apply_night(rgb: np.ndarray, night: NightSpec, rng: np.random.Generator) -> np.ndarray:
    out = night.gain * rgb ** night.gamma
    h, w = rgb.shape[:2]
    for light in night.light_sources:
        out = out + light_profile(light, h, w)[..., None]
    if night.noise_std > 0:
        out = out + rng.normal(0.0, night.noise_std, out.shape)
    return np.clip(out, 0.0, 1.0)


def render_domain(label: LabelMap, style: StyleSpec, night: NightSpec | None,
                  seed: int) -> Image:
    rng = np.random.default_rng(seed)
    rgb = _paint(label, style, rng)
    if night is not None:
        rgb = apply_night(rgb, night, rng)
    return Image(rgb)


def _make_quad(spec: SceneSpec, style_S: StyleSpec, style_T: StyleSpec,
               night_T: NightSpec, batch: int, parallax_max: int,
               use_lab_init: bool, random_lights: int = 0,
               lab_target: str = 'batch') -> tuple[QuadBatch, tuple[LabelMap, ...]]:
    """The QuadBatch plus the hidden T_n labels"""
    if batch < 1:
        raise ValidationError(f"batch must be >= 1, got {batch}")
    s_d, t_d, t_n, hidden, parallax = [], [], [], [], []
    for i in range(batch):
        label = generate_scene(replace(spec, seed=derive_seed(spec.seed, 'scene', i)))
        render_seed = derive_seed(spec.seed, 'render', i)
        s_d.append(DomainSample(Image(_paint(label, style_S, np.random.default_rng(render_seed))),
                                label, DomainTag.S_d))
        day_t = _paint(label, style_T, np.random.default_rng(render_seed))
        t_d.append(DomainSample(Image(day_t), None, DomainTag.T_d))

        prng = random.Random(derive_seed(spec.seed, 'parallax', i))
        shift = (prng.randint(-parallax_max, parallax_max),
                 prng.randint(-parallax_max, parallax_max))
        parallax.append(shift)
        night = night_T
        if random_lights:
            night = night_T.with_random_lights(random_lights, spec.height, spec.width, prng)
        night_rng = np.random.default_rng(derive_seed(spec.seed, 'night', i))
        rolled = np.roll(day_t, shift, axis=(0, 1))
        t_n.append(DomainSample(Image(apply_night(rolled, night, night_rng)), None, DomainTag.T_n))
        hidden.append(label.with_classes(np.roll(label.classes, shift, axis=(0, 1))))

    clamp_fraction = 0.0
    if use_lab_init:
        if lab_target == 'per_image':
            targets = [pooled_stats([s.image]) for s in t_n]
        else:
            targets = [pooled_stats(s.image for s in t_n)] * batch
        reports = [lab_moment_match_report(s.image, tgt) for s, tgt in zip(s_d, targets)]
        s_n_images = [r.image for r in reports]
        s_n_lab = tuple(r.matched_lab for r in reports)
        clamp_fraction = float(np.mean([r.clamp_fraction for r in reports]))
    else:
        s_n_images = [s.image for s in s_d]
        s_n_lab = ()
    s_n = [DomainSample(im, s.label, DomainTag.S_n) for im, s in zip(s_n_images, s_d)]
    quad = QuadBatch(tuple(s_d), tuple(s_n), tuple(t_d), tuple(t_n), tuple(parallax),
                     clamp_fraction, s_n_lab)
    return quad, tuple(hidden)


def make_quad_batch(spec: SceneSpec, style_S: StyleSpec, style_T: StyleSpec,
                    night_T: NightSpec, batch: int, parallax_max: int,
                    use_lab_init: bool, random_lights: int = 0,
                    lab_target: str = 'batch') -> QuadBatch:
    """One aligned training batch across S_d, S_n, T_d, T_n.
    Only the source domains carry labels."""
    return _make_quad(spec, style_S, style_T, night_T, batch, parallax_max,
                      use_lab_init, random_lights, lab_target)[0]


class SyntheticWorld:
    """Deterministic source of QuadBatches and of the hidden eval split.
    Everything is a function of (seed, index) so workers can render
    batches out of order."""

    def __init__(self, cfg: WorldConfig, seed: int):
        self.cfg = cfg
        self.seed = seed

    def quad_batch(self, iteration: int, batch_size: int,
                   use_lab_init: bool | None = None) -> QuadBatch:
        c = self.cfg
        spec = c.scene_spec(derive_seed(self.seed, 'train', iteration))
        return make_quad_batch(spec, c.style_source, c.style_target, c.night, batch_size,
                               c.parallax_max,
                               c.use_lab_init if use_lab_init is None else use_lab_init,
                               c.lights_per_image, c.lab_target)

    def _night_split(self, tag: str, n: int, style: StyleSpec, night: NightSpec) -> EvalSplit:
        c = self.cfg
        spec = c.scene_spec(derive_seed(self.seed, tag))
        quad, hidden = _make_quad(spec, c.style_source, style, night, n, 0,
                                  use_lab_init=False, random_lights=c.lights_per_image)
        return EvalSplit(tuple(s.image for s in quad.t_n), hidden)

    def eval_split(self, n: int | None = None) -> EvalSplit:
        c = self.cfg
        return self._night_split('eval', n or c.eval_images, c.style_target, c.night)

    def alt_eval_split(self, n: int | None = None) -> EvalSplit | None:
        c = self.cfg
        if not c.has_alt:
            return None
        return self._night_split('eval_alt', n or c.eval_images, c.alt_style, c.alt_night)

    def source_labels(self, n_scenes: int = 64) -> list[LabelMap]:
        """Labels of `n_scenes` scenes drawn from the training distribution,
        for class statistics"""
        return [generate_scene(self.cfg.scene_spec(derive_seed(self.seed, 'freq', i)))
                for i in range(n_scenes)]


def _write_images(images: Sequence[Image], d: Path) -> list[str]:
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, im in enumerate(images):
        name = f'img_{i:05d}.png'
        pg_util.save_rgb_png(im.to_uint8(), d / name)
        names.append(name)
    return names


def _write_labels(labels: Sequence[LabelMap], d: Path) -> list[str]:
    names = []
    for i, lb in enumerate(labels):
        name = f'lbl_{i:05d}.png'
        pg_util.save_index_png(lb.classes, d / name)
        names.append(name)
    return names


def write_dataset(world: SyntheticWorld, out_dir: str | Path,
                  chunk: int = 16) -> dict:
    """S_d (+labels), T_d, T_n and the hidden eval split as PNGs plus
    manifest.json; returns the manifest"""
    out = Path(out_dir)
    c = world.cfg
    s_d, s_lbl, t_d, t_n = [], [], [], []
    for it in range((c.train_images + chunk - 1) // chunk):
        n = min(chunk, c.train_images - it * chunk)
        quad = world.quad_batch(it, n, use_lab_init=False)
        s_d += [s.image for s in quad.s_d]
        s_lbl += [s.label for s in quad.s_d]
        t_d += [s.image for s in quad.t_d]
        t_n += [s.image for s in quad.t_n]
    ev = world.eval_split()
    domains = {
        'S_d': {'images': _write_images(s_d, out / 'S_d'),
                'labels': _write_labels(s_lbl, out / 'S_d'), 'labeled': True},
        'T_d': {'images': _write_images(t_d, out / 'T_d'), 'labeled': False},
        'T_n': {'images': _write_images(t_n, out / 'T_n'), 'labeled': False},
        'eval': {'images': _write_images(ev.images, out / 'eval'),
                 'labels': _write_labels(ev.labels, out / 'eval'), 'labeled': True},
    }
    alt = world.alt_eval_split()
    if alt is not None:
        domains['eval_alt'] = {'images': _write_images(alt.images, out / 'eval_alt'),
                               'labels': _write_labels(alt.labels, out / 'eval_alt'),
                               'labeled': True}
    manifest = {
        'seed': world.seed,
        'world': c.to_dict(),
        'domains': {k: {**v, 'count': len(v['images'])} for k, v in domains.items()},
        'seeds': {'train': [derive_seed(world.seed, 'train', i)
                            for i in range((c.train_images + chunk - 1) // chunk)],
                  'eval': derive_seed(world.seed, 'eval')},
        'chunk': chunk,
        'num_classes': c.num_classes,
        'ignore_index': IGNORE_INDEX,
    }
    (out / 'manifest.json').write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(dataset_dir: str | Path) -> dict:
    p = Path(dataset_dir) / 'manifest.json'
    return json.loads(p.read_text())


def load_images(d: str | Path) -> list[Image]:
    return [Image.from_uint8(pg_util.load_rgb_png(p))
            for p in sorted(Path(d).glob('img_*.png'))]


def load_eval_split(dataset_dir: str | Path, split: str = 'eval') -> EvalSplit:
    manifest = read_manifest(dataset_dir)
    d = Path(dataset_dir) / split
    entry = manifest['domains'][split]
    n_cls = manifest['num_classes']
    images = tuple(Image.from_uint8(pg_util.load_rgb_png(d / f)) for f in entry['images'])
    labels = tuple(LabelMap(pg_util.load_index_png(d / f), n_cls, manifest['ignore_index'])
                   for f in entry['labels'])
    return EvalSplit(images, labels)


def translate_images(sources: Sequence[Image], targets: Sequence[Image],
                     per_image: bool = False):
    """Moment-match the sources to the target split's LAB stats.

    Aggregate mode maps the pooled source stats onto the pooled target
    stats with one affine map per channel; `per_image` pairs source i with
    target i mod n."""
    if not sources or not targets:
        raise ValidationError("translate needs non-empty source and target sets")
    if per_image:
        stats = [pooled_stats([targets[i % len(targets)]]) for i in range(len(sources))]
        return [lab_moment_match_report(s, st) for s, st in zip(sources, stats)], stats
    src_stats = pooled_stats(sources)
    stats = [pooled_stats(targets)] * len(sources)
    return [lab_moment_match_report(s, st, src_stats) for s, st in zip(sources, stats)], stats
