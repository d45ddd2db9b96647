"""Dual-model training: M_d sees the day domains (S_d, T_d), M_n the
night domains (S_n, T_n); both take one SGD step per QuadBatch.

Also holds the finite-difference gradient checker used by `gradcheck`.
"""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np
import torch
from torch import Tensor
from tqdm import tqdm

import evalkit
from distill import DistillWeights, LAMBDA_JS, LAMBDA1, LAMBDA2, cdc_terms, l_cds
from imagecore import LabelMap, IGNORE_INDEX
from objective import (TAU, ClassWeights, LossComponents, NonFiniteLoss, StaticClassSet,
                       l_pseudo, labels_to_tensor, static_pseudo_labels, total_loss,
                       weighted_ce)
from segnet import (DTYPE, EMBED_DIM, TAP_CHANNELS, TAP_LAYERS, WIDTH, ProjectHead, SegNet,
                    backward, images_to_tensor, load_checkpoint, load_module, module_tensors,
                    predict, project_head, save_checkpoint)
from synthdomains import QuadBatch, SyntheticWorld, WorldConfig
from uses_run import UsesRun
from util import ValidationError, derive_seed, fmt_size

log = logging.getLogger('ccdistill.trainer')

BASE_LR = 2.5e-4
MOMENTUM = 0.9
WEIGHT_DECAY = 5e-4
POLY_POWER = 0.9
BATCH_SIZE = 2
MAX_ITERS = 5000

FD_STEP = 1e-5
GRAD_CHECK_TOL = 1e-4
GRAD_CHECK_COORDS = 32
GRAD_CHECK_SIZE = 8
REL_ERR_FLOOR = 1e-5
MAX_KINK_RETRIES = 4  # per requested coordinate

ABLATION_FLAGS = ('no_cdc', 'no_cds', 'no_project_head', 'no_ljs', 'no_cor_illu',
                  'no_cor_in', 'no_lab_init', 'stop_grad_source', 'source_only')
TIMING_KEYS = ('wall_time',)


class NonFiniteGradient(RuntimeError):
    def __init__(self, param: str):
        super().__init__(f"gradient of {param!r} is not finite")
        self.param = param


class TrainingDiverged(RuntimeError):
    def __init__(self, reason: str, checkpoint: Path | None):
        super().__init__(f"training diverged: {reason}"
                         + (f" (pre-NaN checkpoint at {checkpoint})" if checkpoint else ''))
        self.reason = reason
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = BASE_LR
    momentum: float = MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    poly_power: float = POLY_POWER
    batch_size: int = BATCH_SIZE
    max_iters: int = MAX_ITERS
    lambda_js: float = LAMBDA_JS
    lambda1: float = LAMBDA1
    lambda2: float = LAMBDA2
    embed_dim: int = EMBED_DIM
    head_hidden: int | None = None
    width: int = WIDTH
    tap_channels: int = TAP_CHANNELS
    tap_layer: str = 'enc3'
    tau: float = TAU
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    class_weight_scenes: int = 64
    log_every: int = 100
    eval_every: int = 500
    checkpoint_every: int = 0  # 0: only the final checkpoint
    eval_images: int | None = None  # defaults to the world's eval split size
    prefetch: int = 2
    no_cdc: bool = False
    no_cds: bool = False
    no_project_head: bool = False
    no_ljs: bool = False
    no_cor_illu: bool = False
    no_cor_in: bool = False
    no_lab_init: bool = False
    stop_grad_source: bool = False
    source_only: bool = False

    def __post_init__(self):
        if not self.base_lr > 0 or not self.poly_power > 0:
            raise ValidationError("base_lr and poly_power must be > 0")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValidationError("momentum and weight_decay must be >= 0")
        if self.max_iters < 1 or self.batch_size < 1:
            raise ValidationError("max_iters and batch_size must be >= 1")
        if self.tap_layer not in TAP_LAYERS:
            raise ValidationError(f"tap_layer must be one of {TAP_LAYERS}, got {self.tap_layer!r}")
        if not 0 <= self.tau <= 1:
            raise ValidationError(f"tau must be in [0, 1], got {self.tau}")
        for name in ('log_every', 'eval_every', 'checkpoint_every', 'prefetch'):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        object.__setattr__(self, 'seeds', tuple(int(s) for s in self.seeds))
        self.weights  # validates the lambdas

    @property
    def weights(self) -> DistillWeights:
        return DistillWeights(self.lambda_js, self.lambda1, self.lambda2)

    @property
    def flags(self) -> dict[str, bool]:
        return {f: getattr(self, f) for f in ABLATION_FLAGS}

    def with_flags(self, **flags: bool) -> TrainConfig:
        unknown = set(flags) - set(ABLATION_FLAGS)
        if unknown:
            raise ValidationError(f"unknown ablation flags {sorted(unknown)}")
        return replace(self, **{f: bool(flags.get(f, False)) for f in ABLATION_FLAGS})

    def to_dict(self) -> dict:
        d = asdict(self)
        d['seeds'] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config keys {sorted(unknown)}")
        d = dict(d)
        if 'seeds' in d:
            d['seeds'] = tuple(d['seeds'])
        return cls(**d)


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    if not 0 <= iteration <= cfg.max_iters:
        raise ValidationError(f"iteration {iteration} outside [0, {cfg.max_iters}]")
    return cfg.base_lr * (1 - iteration / cfg.max_iters) ** cfg.poly_power


def check_finite_grads(grads: Mapping[str, Tensor]):
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(name)


def sgd_step(optimizer: torch.optim.SGD, params: Mapping[str, Tensor],
             grads: Mapping[str, Tensor], lr: float):
    """v <- momentum*v + g + wd*p; p <- p - lr*v for every named parameter"""
    missing = set(params) - set(grads)
    if missing:
        raise ValidationError(f"no gradient for {sorted(missing)}")
    check_finite_grads({n: grads[n] for n in params})
    for name, p in params.items():
        p.grad = grads[name].detach().clone()
    for group in optimizer.param_groups:
        group['lr'] = lr
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


@dataclass(eq=False)
class Branch:
    """One segmentation model with its projection head and optimizer"""
    name: str
    net: SegNet
    head: ProjectHead | None
    optimizer: torch.optim.SGD

    @classmethod
    def create(cls, name: str, cfg: TrainConfig, num_classes: int) -> Branch:
        net = SegNet.create(num_classes, derive_seed(cfg.seed, name, 'net'), width=cfg.width,
                            tap_channels=cfg.tap_channels, tap_layer=cfg.tap_layer)
        head = None
        if not cfg.no_project_head:
            head = ProjectHead.create(net.tap_channels, derive_seed(cfg.seed, name, 'head'),
                                      embed_dim=cfg.embed_dim, hidden=cfg.head_hidden)
        params = list(net.parameters()) + (list(head.parameters()) if head else [])
        opt = torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum,
                              weight_decay=cfg.weight_decay)
        return cls(name, net, head, opt)

    def named_params(self) -> dict[str, Tensor]:
        out = module_tensors(f'{self.name}.net', self.net)
        if self.head is not None:
            out.update(module_tensors(f'{self.name}.head', self.head))
        return out

    def momentum_buffers(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.named_params().items():
            buf = self.optimizer.state[p].get('momentum_buffer') if p in self.optimizer.state else None
            out[f'{name}.momentum'] = torch.zeros_like(p) if buf is None else buf.detach().clone()
        return out

    def load(self, tensors: Mapping[str, Tensor], with_momentum: bool):
        load_module(f'{self.name}.net', self.net, tensors)
        if self.head is not None:
            load_module(f'{self.name}.head', self.head, tensors)
        if with_momentum:
            for name, p in self.named_params().items():
                self.optimizer.state[p]['momentum_buffer'] = tensors[f'{name}.momentum'].clone()

    def step(self, grads: Mapping[str, Tensor], lr: float):
        sgd_step(self.optimizer, self.named_params(), grads, lr)


@dataclass(eq=False)
class TrainState:
    cfg: TrainConfig
    num_classes: int
    m_d: Branch
    m_n: Branch
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: TrainConfig, num_classes: int) -> TrainState:
        return cls(cfg, num_classes, Branch.create('m_d', cfg, num_classes),
                   Branch.create('m_n', cfg, num_classes))

    @property
    def branches(self) -> tuple[Branch, Branch]:
        return self.m_d, self.m_n

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for br in self.branches:
            out.update(br.named_params())
            out.update(br.momentum_buffers())
        return out

    def save(self, path: str | Path) -> Path:
        meta = {'iteration': self.iteration, 'num_classes': self.num_classes,
                'train': self.cfg.to_dict(), 'history': self.history}
        return save_checkpoint(path, self.named_tensors(), meta)

    @classmethod
    def load(cls, path: str | Path, cfg: TrainConfig | None = None) -> TrainState:
        """Resume point: parameters, momentum buffers, iteration and
        history. The data stream needs no RNG state, batches are a
        function of (seed, iteration)."""
        tensors, meta = load_checkpoint(path)
        cfg = cfg or TrainConfig.from_dict(meta['train'])
        state = cls.create(cfg, meta['num_classes'])
        for br in state.branches:
            br.load(tensors, with_momentum=meta['iteration'] > 0)
        state.iteration = meta['iteration']
        state.history = list(meta.get('history', []))
        return state


def load_night_model(path: str | Path) -> SegNet:
    """Only M_n's segmentation net, for inference"""
    tensors, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta['train'])
    net = SegNet(meta['num_classes'], cfg.width, cfg.tap_channels, cfg.tap_layer).to(DTYPE)
    load_module('m_n.net', net, tensors)
    return net


def class_weights_from_labels(labels: Iterable[LabelMap], num_classes: int) -> ClassWeights:
    counts = np.zeros(num_classes, dtype=np.int64)
    for lb in labels:
        valid = lb.classes[lb.classes != lb.ignore_index]
        counts += np.bincount(valid.ravel(), minlength=num_classes)[:num_classes]
    if counts.sum() == 0:
        raise ValidationError("no labelled pixels to compute class weights from")
    return ClassWeights.from_frequencies(counts / counts.sum())


def compute_losses(state: TrainState, quad: QuadBatch, cfg: TrainConfig, w: ClassWeights,
                   statics: StaticClassSet, pseudo: Tensor | None = None
                   ) -> tuple[LossComponents, dict]:
    """Every loss term for one QuadBatch, honouring the ablation flags.
    `pseudo` fixes the static pseudo-label map instead of deriving it
    from M_d's day prediction."""
    y = labels_to_tensor(s.label for s in quad.s_d)
    zero = torch.zeros((), dtype=DTYPE)
    if cfg.source_only:
        logits, _ = state.m_n.net(images_to_tensor([s.image for s in quad.s_d]))
        return LossComponents(weighted_ce(logits, y, w), zero, zero, zero, zero), {}
    b = len(quad)
    lg_d, f_d = state.m_d.net(images_to_tensor([s.image for s in quad.s_d + quad.t_d]))
    lg_n, f_n = state.m_n.net(images_to_tensor([s.image for s in quad.s_n + quad.t_n]))
    seg_d = weighted_ce(lg_d[:b], y, w)
    seg_n = weighted_ce(lg_n[:b], y, w)
    if pseudo is None:
        pseudo = static_pseudo_labels(lg_d[b:], statics, cfg.tau)
    l_ps = l_pseudo(lg_n[b:], pseudo, w)
    aux = {'pseudo_fraction': float((pseudo != IGNORE_INDEX).double().mean())}
    cdc = cds = zero
    if not cfg.no_cdc:
        e_d = project_head(state.m_d.head, f_d)
        e_n = project_head(state.m_n.head, f_n)
        terms = cdc_terms(e_d[:b], e_n[:b], e_d[b:], e_n[b:], cfg.lambda_js,
                          use_illu=not cfg.no_cor_illu, use_inherent=not cfg.no_cor_in,
                          use_js=not cfg.no_ljs, stop_grad_source=cfg.stop_grad_source)
        cdc = terms.total
        aux.update(cdc_illu=terms.illu.detach().item(), cdc_inherent=terms.inherent.detach().item(),
                   cdc_js=terms.js.detach().item(), degenerate=terms.degenerate)
    if not cfg.no_cds:
        cds = l_cds(f_d[:b], f_n[:b], f_d[b:], f_n[b:])
    return LossComponents(seg_n, seg_d, l_ps, cdc, cds), aux


def comparable(records: Iterable[dict]) -> list[dict]:
    """Metrics records without the timing fields"""
    return [{k: v for k, v in r.items() if k not in TIMING_KEYS} for r in records]


class Trainer(UsesRun):
    def __init__(self, run, world: SyntheticWorld | None = None):
        super().__init__(run)
        self.tcfg: TrainConfig = self.cfg.train
        self.world = world or SyntheticWorld(self.cfg.world, self.tcfg.seed)
        wc = self.world.cfg
        self.statics = StaticClassSet(wc.static_classes, wc.num_classes)
        self.class_weights = class_weights_from_labels(
            self.world.source_labels(self.tcfg.class_weight_scenes), wc.num_classes)
        self.log.debug(f"Class weights: {[round(v, 3) for v in self.class_weights.weights]}")
        self._eval = None
        self._eval_alt = None

    @property
    def ckpt_dir(self) -> Path | None:
        return None if self.out_dir is None else Path(self.out_dir) / 'checkpoints'

    def init_state(self) -> TrainState:
        return TrainState.create(self.tcfg, self.world.cfg.num_classes)

    def _load_eval(self):
        if self._eval is None:
            t0 = time.perf_counter()
            n = self.tcfg.eval_images
            self._eval = self.world.eval_split(n)
            self._eval_alt = self.world.alt_eval_split(n)
            t1 = time.perf_counter()
            self.log.debug(f"Rendered {len(self._eval)} eval images in {t1 - t0:.2f}s")

    def validate(self, state: TrainState) -> dict[str, float]:
        """mIoU of M_n on the hidden night labels"""
        self._load_eval()
        k = self.world.cfg.num_classes
        out = {}
        for key, split in (('val_miou', self._eval), ('val_miou_alt', self._eval_alt)):
            if split is None:
                continue
            cm = evalkit.score(predict(state.m_n.net, split.images), split.labels, k)
            out[key] = evalkit.miou(evalkit.per_class_iou(cm))
        return out

    def batches(self, start: int, stop: int) -> Iterator[QuadBatch]:
        """QuadBatches for iterations [start, stop), rendered up to
        `prefetch` iterations ahead in a worker thread"""
        c = self.tcfg

        def make(it: int) -> QuadBatch:
            return self.world.quad_batch(it, c.batch_size, use_lab_init=not c.no_lab_init)

        if c.prefetch == 0:
            for it in range(start, stop):
                yield make(it)
            return
        pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix='quad')
        pending: deque[Future] = deque()
        nxt = start
        try:
            while nxt < stop and len(pending) < c.prefetch:
                pending.append(pool.submit(make, nxt))
                nxt += 1
            while pending:
                batch = pending.popleft().result()
                if nxt < stop:
                    pending.append(pool.submit(make, nxt))
                    nxt += 1
                yield batch
        finally:
            pool.shutdown(wait=True, cancel_futures=True)

    def _diverged(self, state: TrainState, err: Exception) -> TrainingDiverged:
        path = None
        if self.ckpt_dir is not None:
            path = state.save(self.ckpt_dir / 'pre_nan')
        self.log.error(f"Iteration {state.iteration}: {err}")
        return TrainingDiverged(str(err), path)

    def step(self, state: TrainState, quad: QuadBatch) -> dict:
        """One iteration; `state` is only modified when the step succeeds"""
        c = self.tcfg
        it = state.iteration
        lr = poly_lr(it, c)
        comps, aux = compute_losses(state, quad, c, self.class_weights, self.statics)
        try:
            total = total_loss(comps, c.weights)
        except NonFiniteLoss as e:
            raise self._diverged(state, e) from e
        stepping = (state.m_n,) if c.source_only else state.branches
        params = {n: p for br in stepping for n, p in br.named_params().items()}
        grads = backward(total, params)
        try:
            check_finite_grads(grads)
        except NonFiniteGradient as e:
            raise self._diverged(state, e) from e
        for br in stepping:
            br.step(grads, lr)
        state.iteration += 1
        return {'iter': it, 'lr': lr, 'total': total.detach().item(), **comps.as_floats(), **aux,
                'lab_clamp_fraction': quad.lab_clamp_fraction}

    def _is_due(self, every: int, done: int) -> bool:
        return done == self.tcfg.max_iters or (every > 0 and done % every == 0)

    def train(self, state: TrainState | None = None,
              on_record: Callable[[dict], None] | None = None) -> TrainState:
        """Run (or resume) to max_iters. Each record goes to
        `<out_dir>/metrics.jsonl` and to `on_record`."""
        c = self.tcfg
        state = state or self.init_state()
        if state.iteration >= c.max_iters:
            self.log.info(f"Nothing to do, already at iteration {state.iteration}")
            return state
        self._load_eval()
        metrics = None
        if self.out_dir is not None:
            Path(self.out_dir).mkdir(parents=True, exist_ok=True)
            metrics = open(Path(self.out_dir) / 'metrics.jsonl', 'a')
        self.log.info(f"Training from iteration {state.iteration} to {c.max_iters}"
                      + (f" (flags: {', '.join(k for k, v in c.flags.items() if v)})"
                         if any(c.flags.values()) else ''))
        t0 = time.perf_counter()
        try:
            progress = tqdm(self.batches(state.iteration, c.max_iters), total=c.max_iters,
                            initial=state.iteration, disable=not self.progress,
                            desc='train', unit='it', leave=False)
            for quad in progress:
                record = self.step(state, quad)
                record['wall_time'] = time.perf_counter() - t0
                done = state.iteration
                if self._is_due(c.eval_every, done):
                    record.update(self.validate(state))
                state.history.append(record)
                if metrics is not None:
                    metrics.write(json.dumps(record) + '\n')
                    metrics.flush()
                if on_record is not None:
                    on_record(record)
                self._log_record(record)
                if self.ckpt_dir is not None and c.checkpoint_every and done % c.checkpoint_every == 0:
                    state.save(self.ckpt_dir / f'iter_{done:06d}')
        finally:
            if metrics is not None:
                metrics.close()
        t1 = time.perf_counter()
        self.log.info(f"Trained to iteration {state.iteration} in {t1 - t0:.2f}s")
        if self.ckpt_dir is not None:
            stem = state.save(self.ckpt_dir / 'final')
            size = stem.with_suffix('.bin').stat().st_size
            self.log.info(f"Saved {stem} ({fmt_size(size)})")
        return state

    def _log_record(self, r: dict):
        every = self.tcfg.log_every
        if 'val_miou' in r:
            self.log.info(f"iter {r['iter'] + 1}: val mIoU {100 * r['val_miou']:.2f}"
                          + (f", alt {100 * r['val_miou_alt']:.2f}" if 'val_miou_alt' in r else ''))
        if every and r['iter'] % every == 0:
            self.log.info(f"iter {r['iter']}: lr {r['lr']:.3e} loss {r['total']:.4f}")
            self.log.debug('  ' + ' '.join(f"{k}={r[k]:.4f}" for k in
                                           ('seg_n', 'seg_d', 'pseudo', 'cdc', 'cds')))


@dataclass(frozen=True)
class GradCheckEntry:
    component: str
    tensor: str
    n_coords: int
    max_rel_error: float
    kinks: int = 0  # coordinates resampled because a ReLU kink lay within h
    requested: int = 0

    @property
    def complete(self) -> bool:
        return self.n_coords >= self.requested


@dataclass(frozen=True)
class GradCheckReport:
    entries: tuple[GradCheckEntry, ...]
    tolerance: float

    @property
    def components(self) -> list[str]:
        return list(dict.fromkeys(e.component for e in self.entries))

    def max_error(self, component: str | None = None) -> float:
        errs = [e.max_rel_error for e in self.entries
                if component is None or e.component == component]
        return max(errs, default=0.0)

    def incomplete(self, component: str | None = None) -> list[GradCheckEntry]:
        return [e for e in self.entries
                if not e.complete and (component is None or e.component == component)]

    @property
    def passed(self) -> bool:
        return self.max_error() <= self.tolerance and not self.incomplete()

    def format(self) -> str:
        lines = [f"{'component':<10} {'max rel err':>12}  status"]
        for comp in self.components:
            err = self.max_error(comp)
            status = ('FAIL' if err > self.tolerance
                      else 'SHORT' if self.incomplete(comp) else 'ok')
            lines.append(f"{comp:<10} {err:>12.3e}  {status}")
        kinks = sum(e.kinks for e in self.entries)
        lines.append(f"tolerance {self.tolerance:.1e}, {len({e.tensor for e in self.entries})}"
                     f" tensors, {kinks} kink resamples")
        return '\n'.join(lines)


def _floats(values: Mapping[str, Tensor]) -> dict[str, float]:
    return {k: v.detach().item() for k, v in values.items()}


def check_gradients(losses_fn: Callable[[], Mapping[str, Tensor]],
                    params: Mapping[str, Tensor], n_coords: int = GRAD_CHECK_COORDS,
                    tolerance: float = GRAD_CHECK_TOL, h: float = FD_STEP,
                    seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of every loss `losses_fn` returns
    against central differences at `n_coords` random coordinates of each
    parameter tensor.

    A coordinate where the two one-sided differences disagree by more
    than the central estimate misses the analytic gradient has a kink
    within h, it is replaced by a fresh one. A tensor that runs out of
    retries before `n_coords` clean coordinates fails the report.
    """
    rng = np.random.default_rng(seed)
    values = losses_fn()
    names = list(values)
    base = _floats(values)
    analytic = {comp: backward(values[comp], params, retain_graph=True) for comp in names}
    del values
    entries = []
    for pname, p in params.items():
        flat = p.data.view(-1)
        k = min(n_coords, flat.numel())
        order = iter(rng.permutation(flat.numel()))
        errs = dict.fromkeys(names, 0.0)
        kinks = checked = tries = 0
        while checked < k and tries < k * MAX_KINK_RETRIES:
            j = next(order, None)
            if j is None:
                break
            j = int(j)
            tries += 1
            orig = float(flat[j])
            with torch.no_grad():
                flat[j] = orig + h
                plus = _floats(losses_fn())
                flat[j] = orig - h
                minus = _floats(losses_fn())
                flat[j] = orig
            coord = {}
            kink = False
            for comp in names:
                central = (plus[comp] - minus[comp]) / (2 * h)
                ana = float(analytic[comp][pname].reshape(-1)[j])
                one_sided_gap = abs((plus[comp] - base[comp]) - (base[comp] - minus[comp])) / h
                miss = abs(ana - central)
                coord[comp] = miss / max(abs(ana), abs(central), REL_ERR_FLOOR)
                if coord[comp] > tolerance and one_sided_gap > miss:
                    kink = True
            if kink:
                kinks += 1
                continue
            checked += 1
            for comp in names:
                errs[comp] = max(errs[comp], coord[comp])
        entries += [GradCheckEntry(comp, pname, checked, errs[comp], kinks, k) for comp in names]
    return GradCheckReport(tuple(entries), tolerance)


def surrogate_pseudo_labels(logits: Tensor, seed: int) -> Tensor:
    """Uniform random class per position, shaped like the argmax of `logits`"""
    n, c, hh, ww = logits.shape
    g = torch.Generator().manual_seed(seed)
    return torch.randint(c, (n, hh, ww), generator=g)


def grad_check(cfg: TrainConfig, world: WorldConfig | None = None,
               n_coords: int = GRAD_CHECK_COORDS, tolerance: float = GRAD_CHECK_TOL,
               size: int = GRAD_CHECK_SIZE, h: float = FD_STEP) -> GradCheckReport:
    """Finite-difference check of every loss component and the total on
    one size x size QuadBatch, for all parameters of both models.

    L_pseudo is checked against a fixed seeded label map over all classes;
    the day model's own static pseudo map can be all-ignore at init.
    """
    wcfg = replace(world or WorldConfig(), height=size, width=size)
    synth = SyntheticWorld(wcfg, cfg.seed)
    statics = StaticClassSet(wcfg.static_classes, wcfg.num_classes)
    w = class_weights_from_labels(synth.source_labels(16), wcfg.num_classes)
    state = TrainState.create(cfg, wcfg.num_classes)
    quad = synth.quad_batch(0, cfg.batch_size, use_lab_init=not cfg.no_lab_init)
    with torch.no_grad():
        day_logits, _ = state.m_d.net(images_to_tensor([s.image for s in quad.t_d]))
    pseudo = surrogate_pseudo_labels(day_logits, derive_seed(cfg.seed, 'gradcheck-pseudo'))
    if not bool((pseudo != IGNORE_INDEX).any()):
        raise ValidationError("gradient check pseudo-label map has no labelled pixels")

    def losses() -> dict[str, Tensor]:
        comps, _ = compute_losses(state, quad, cfg, w, statics, pseudo=pseudo)
        return {**dict(comps.items()), 'total': total_loss(comps, cfg.weights)}

    params = {n: p for br in state.branches for n, p in br.named_params().items()}
    t0 = time.perf_counter()
    report = check_gradients(losses, params, n_coords, tolerance, h,
                             seed=derive_seed(cfg.seed, 'gradcheck'))
    t1 = time.perf_counter()
    log.info(f"Gradient check over {len(params)} tensors in {t1 - t0:.2f}s")
    return report
