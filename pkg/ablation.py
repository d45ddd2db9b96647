"""The ablation matrix: which loss terms each variant switches off, and
the sweep that trains every (variant, seed) pair."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import torch

from config import RunConfig, UsageError
from evalkit import ABLATION_ROWS, RunResult
from trainer import Trainer
from uses_run import RunContext, RunLogger, RunManifest, UsesRun


@dataclass(frozen=True)
class Variant:
    label: str
    slug: str
    flags: Mapping[str, bool]


VARIANTS: dict[str, Variant] = {v.label: v for v in (
    Variant('ours', 'ours', {}),
    Variant('w/o CDC', 'no_cdc', {'no_cdc': True}),
    Variant('w/o project head', 'no_project_head', {'no_project_head': True}),
    Variant('w/o L_JS', 'no_ljs', {'no_ljs': True}),
    Variant('w/o illu-corr', 'no_cor_illu', {'no_cor_illu': True}),
    Variant('w/o inherent-corr', 'no_cor_in', {'no_cor_in': True}),
    Variant('w/o CDS', 'no_cds', {'no_cds': True}),
    Variant('w/o LAB trans', 'no_lab_init', {'no_lab_init': True}),
    Variant('w/o CDC and CDS', 'no_cdc_cds', {'no_cdc': True, 'no_cds': True}),
    Variant('baseline', 'baseline', {'source_only': True}),
)}
assert tuple(VARIANTS) == ABLATION_ROWS


def find_variant(name: str) -> Variant:
    """By table label or by slug"""
    for v in VARIANTS.values():
        if name in (v.label, v.slug):
            return v
    raise UsageError(f"unknown variant {name!r}, expected one of "
                     f"{', '.join(v.slug for v in VARIANTS.values())}")


def variant_config(cfg: RunConfig, variant: Variant, seed: int) -> RunConfig:
    train = replace(cfg.train.with_flags(**variant.flags), seed=seed)
    return replace(cfg, train=train)


def worker_init():
    # one intra-op thread per worker, the pool supplies the parallelism
    torch.set_num_threads(1)


def run_variant(cfg: RunConfig, variant: str, seed: int, out_dir: str | Path | None,
                log_level: int = logging.WARNING, progress: bool = False,
                log: logging.Logger | None = None) -> RunResult:
    """Train one (variant, seed) pair in isolation; importable by worker
    processes"""
    v = find_variant(variant)
    run_cfg = variant_config(cfg, v, seed)
    out = None if out_dir is None else Path(out_dir)
    manifest = RunManifest('ablate-run', [v.slug, str(seed)], run_cfg.to_dict(), run_cfg.hash,
                           [seed], None if out is None else str(out))
    manifest.write()
    if out is not None:
        (out / 'config.json').write_text(run_cfg.to_json())
    run = RunContext(run_cfg, out, log or RunLogger(log_level), progress)
    try:
        trainer = Trainer(run)
        state = trainer.train()
    except BaseException:
        manifest.finish('failed')
        raise
    if out is not None:
        manifest.add(out / 'config.json', out / 'metrics.jsonl',
                     trainer.ckpt_dir / 'final.json', trainer.ckpt_dir / 'final.bin')
    manifest.finish('ok')
    finals = [r for r in state.history if 'val_miou' in r]
    last = finals[-1] if finals else {}
    return RunResult(v.label, seed, last.get('val_miou', float('nan')),
                     last.get('val_miou_alt'), state.history,
                     None if out is None else str(out))


class Sweep(UsesRun):
    def __init__(self, run: RunContext, variants: Sequence[str] | None = None,
                 seeds: Sequence[int] | None = None, jobs: int = 1):
        super().__init__(run)
        self.variants = [find_variant(v) for v in (variants or VARIANTS)]
        self.seeds = list(seeds if seeds is not None else self.cfg.train.seeds)
        if not self.seeds:
            raise UsageError("the sweep needs at least one seed")
        self.jobs = max(1, jobs)

    def run_dir(self, variant: Variant, seed: int) -> Path | None:
        if self.out_dir is None:
            return None
        return Path(self.out_dir) / 'runs' / f'{variant.slug}_seed{seed}'

    @property
    def pairs(self) -> list[tuple[Variant, int]]:
        return [(v, s) for v in self.variants for s in self.seeds]

    def run_all(self) -> list[RunResult]:
        t0 = time.perf_counter()
        self.log.info(f"Sweeping {len(self.variants)} variants x {len(self.seeds)} seeds"
                      f" with {self.jobs} job(s)")
        level = self.log.getEffectiveLevel()
        if self.jobs == 1:
            quiet = logging.getLogger('ccdistill.sweep')
            quiet.setLevel(max(level, logging.WARNING))
            results = []
            for v, s in self.pairs:
                self.log.info(f"Training {v.label!r}, seed {s}")
                results.append(run_variant(self.cfg, v.slug, s, self.run_dir(v, s),
                                           progress=self.progress, log=quiet))
        else:
            results = self._run_parallel(level)
        t1 = time.perf_counter()
        self.log.info(f"Sweep finished in {t1 - t0:.2f}s")
        order = {(v.label, s): i for i, (v, s) in enumerate(self.pairs)}
        return sorted(results, key=lambda r: order[(r.variant, r.seed)])

    def _run_parallel(self, level: int) -> list[RunResult]:
        results = []
        with ProcessPoolExecutor(max_workers=self.jobs, initializer=worker_init) as pool:
            futures = {pool.submit(run_variant, self.cfg, v.slug, s, self.run_dir(v, s),
                                   max(level, logging.WARNING)): (v, s)
                       for v, s in self.pairs}
            for fut in as_completed(futures):
                v, s = futures[fut]
                result = fut.result()
                self.log.info(f"Finished {v.label!r}, seed {s}: "
                              f"mIoU {100 * result.final_miou:.2f}")
                results.append(result)
        return results


def write_results(results: Sequence[RunResult], path: str | Path):
    Path(path).write_text(json.dumps([r.to_dict() for r in results], indent=2))
