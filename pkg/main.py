from __future__ import annotations

import argparse
import json
import logging as lg
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

import evalkit
import plots
from ablation import Sweep, find_variant, variant_config, write_results
from config import RunConfig, UsageError, load_config
from imagecore import IGNORE_INDEX, pooled_stats
from perf import CpuProfile
from segnet import predict
from synthdomains import (EvalSplit, SyntheticWorld, load_eval_split, load_images, read_manifest,
                          translate_images, write_dataset)
from trainer import TrainState, Trainer, TrainingDiverged, grad_check, load_night_model
import pg_util
from uses_run import MANIFEST_NAME, RunContext, RunLogger, RunManifest
from util import ValidationError

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2


class VerificationFailed(Exception):
    """A check ran and did not pass (exit code 1)"""


def _out_dir(args, required=True) -> Path | None:
    if args.out is None:
        if required:
            raise UsageError(f"{args.command} needs --out DIR")
        return None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {out}: {e}") from e
    return out


def _parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(',') if s.strip()]
    except ValueError as e:
        raise UsageError(f"--seeds must be comma separated integers, got {text!r}") from e


def _existing_dir(path: str | None, what: str) -> Path:
    if path is None or not Path(path).is_dir():
        raise UsageError(f"{what} directory {path} does not exist")
    return Path(path)


class Cli:
    def __init__(self, args: argparse.Namespace, log: lg.Logger):
        self.args = args
        self.log = log
        self.cfg = load_config(args.config)
        if getattr(args, 'seed', None) is not None:
            self.cfg = self.cfg.with_train(seed=args.seed)
        seeds = _parse_seeds(getattr(args, 'seeds', None))
        if seeds is not None:
            self.cfg = self.cfg.with_train(seeds=tuple(seeds))
        self.manifest: RunManifest | None = None

    def context(self, cfg: RunConfig, out: Path | None) -> RunContext:
        return RunContext(cfg, out, self.log, progress=not self.args.quiet)

    def start_manifest(self, cfg: RunConfig, out: Path | None, seeds: Sequence[int]):
        self.manifest = RunManifest(self.args.command, list(self.args.argv), cfg.to_dict(),
                                    cfg.hash, list(seeds), None if out is None else str(out))
        self.manifest.write()

    def run(self) -> int:
        handler: Callable[[], int] = getattr(self, f'cmd_{self.args.command}')
        with CpuProfile(self.args.profile, self.log):
            try:
                code = handler()
            except BaseException:
                if self.manifest is not None:
                    self.manifest.finish('failed')
                raise
        if self.manifest is not None:
            self.manifest.finish('ok' if code == EXIT_OK else 'failed')
        return code

    def cmd_generate(self) -> int:
        out = _out_dir(self.args)
        seed = self.cfg.train.seed
        self.start_manifest(self.cfg, out, [seed])
        t0 = time.perf_counter()
        manifest = write_dataset(SyntheticWorld(self.cfg.world, seed), out)
        t1 = time.perf_counter()
        counts = ', '.join(f"{k}: {v['count']}" for k, v in manifest['domains'].items())
        self.log.info(f"Wrote dataset to {out} ({counts}) in {t1 - t0:.2f}s")
        self.manifest.add(out / 'manifest.json', *(out / k for k in manifest['domains']))
        return EXIT_OK

    def cmd_translate(self) -> int:
        src_dir = _existing_dir(self.args.src, 'source')
        tgt_dir = _existing_dir(self.args.tgt, 'target')
        out = _out_dir(self.args)
        self.start_manifest(self.cfg, out, [])
        src, tgt = load_images(src_dir), load_images(tgt_dir)
        if not src or not tgt:
            raise UsageError("translate needs PNG images in both --src and --tgt")
        t0 = time.perf_counter()
        reports, stats = translate_images(src, tgt, per_image=self.args.per_image)
        outputs = []
        for i, r in enumerate(reports):
            p = out / f'img_{i:05d}.png'
            pg_util.save_rgb_png(r.image.to_uint8(), p)
            outputs.append(p)
        clamp = float(np.mean([r.clamp_fraction for r in reports]))
        sidecar = {
            'mode': 'per_image' if self.args.per_image else 'aggregate',
            'target_stats': pooled_stats(tgt).to_dict(),
            'per_image_targets': [s.to_dict() for s in stats] if self.args.per_image else None,
            'translated_stats': pooled_stats(r.image for r in reports).to_dict(),
            'clamp_fraction': clamp,
            'per_image_clamp_fraction': [r.clamp_fraction for r in reports],
        }
        sidecar_path = out / 'translate_stats.json'
        sidecar_path.write_text(json.dumps(sidecar, indent=2))
        t1 = time.perf_counter()
        self.log.info(f"Translated {len(src)} images in {t1 - t0:.2f}s,"
                      f" clamp fraction {clamp:.2e}")
        self.manifest.add(*outputs, sidecar_path)
        return EXIT_OK

    def cmd_train(self) -> int:
        out = _out_dir(self.args)
        cfg = self.cfg
        if self.args.variant is not None:
            cfg = variant_config(cfg, find_variant(self.args.variant), cfg.train.seed)
        self.start_manifest(cfg, out, [cfg.train.seed])
        (out / 'config.json').write_text(cfg.to_json())
        trainer = Trainer(self.context(cfg, out))
        state = None
        if self.args.checkpoint is not None:
            state = TrainState.load(_checkpoint(self.args.checkpoint), cfg.train)
            self.log.info(f"Resuming from iteration {state.iteration}")
        try:
            state = trainer.train(state)
        except TrainingDiverged as e:
            self.log.error(str(e))
            if e.checkpoint is not None:
                self.manifest.add(e.checkpoint.with_suffix('.json'), e.checkpoint.with_suffix('.bin'))
            return EXIT_VERIFICATION
        plot = plots.plot_loss_components(state.history, out / 'loss_components.png')
        self.manifest.add(out / 'config.json', out / 'metrics.jsonl',
                          trainer.ckpt_dir / 'final.json', trainer.ckpt_dir / 'final.bin', plot)
        return EXIT_OK

    def cmd_eval(self) -> int:
        ckpt = _checkpoint(self.args.checkpoint)
        out = _out_dir(self.args, required=False)
        self.start_manifest(self.cfg, out, [self.cfg.train.seed])
        net = load_night_model(ckpt)
        if self.args.dataset is not None:
            d = _existing_dir(self.args.dataset, 'dataset')
            split = load_eval_split(d, self.args.split)
            names = read_manifest(d)['world']['class_names']
        else:
            world = SyntheticWorld(self.cfg.world, self.cfg.train.seed)
            split = world.eval_split() if self.args.split == 'eval' else world.alt_eval_split()
            if split is None:
                raise UsageError(f"the config has no {self.args.split} split")
            names = self.cfg.world.class_names
        preds = predict(net, split.images)
        cm = evalkit.score(preds, split.labels, net.num_classes)
        ious = evalkit.per_class_iou(cm)
        print(evalkit.format_iou_table(ious, names))
        if out is not None:
            p = out / 'eval.json'
            p.write_text(json.dumps({'split': self.args.split, 'per_class_iou': ious.to_list(),
                                     'miou': evalkit.miou(ious),
                                     'confusion': cm.counts.tolist()}, indent=2))
            self.manifest.add(p)
            self.manifest.add(*self._write_vis(out / 'vis', split, preds, net.num_classes))
        return EXIT_OK

    def _write_vis(self, d: Path, split: EvalSplit, preds: Sequence[np.ndarray], num_classes: int
                   ) -> list[Path]:
        """Input, colourised prediction and colourised truth for the first
        --vis images"""
        n = min(self.args.vis, len(preds))
        if n <= 0:
            return []
        d.mkdir(parents=True, exist_ok=True)
        colors = plots.class_colors(num_classes)
        paths = []
        for i in range(n):
            image, pred, truth = (d / f'{kind}_{i:05d}.png' for kind in ('image', 'pred', 'truth'))
            pg_util.save_rgb_png(split.images[i].to_uint8(), image)
            pg_util.save_class_png(np.asarray(preds[i]), colors, pred, IGNORE_INDEX)
            pg_util.save_class_png(split.labels[i].classes, colors, truth, IGNORE_INDEX)
            paths += [image, pred, truth]
        self.log.info(f"Wrote {n} prediction maps to {d}")
        return paths

    def cmd_gradcheck(self) -> int:
        out = _out_dir(self.args, required=False)
        self.start_manifest(self.cfg, out, [self.cfg.train.seed])
        report = grad_check(self.cfg.train, self.cfg.world, n_coords=self.args.coords,
                            tolerance=self.args.tolerance, size=self.args.size)
        print(report.format())
        if out is not None:
            p = out / 'gradcheck.json'
            p.write_text(json.dumps({'passed': report.passed, 'tolerance': report.tolerance,
                                     'entries': [asdict(e) for e in report.entries]}, indent=2))
            self.manifest.add(p)
        if report.incomplete():
            short = ', '.join(sorted({e.tensor for e in report.incomplete()}))
            raise VerificationFailed(f"gradient check ran short of clean coordinates on {short}")
        if not report.passed:
            raise VerificationFailed(
                f"gradient check failed: max relative error {report.max_error():.3e}"
                f" > {report.tolerance:.1e}")
        return EXIT_OK

    def cmd_ablate(self) -> int:
        out = _out_dir(self.args)
        sweep = Sweep(self.context(self.cfg, out), self.args.variant or None,
                      self.cfg.train.seeds, self.args.jobs)
        self.start_manifest(self.cfg, out, sweep.seeds)
        results = sweep.run_all()
        table = evalkit.report(results)
        text = evalkit.format_report(table)
        print(text)
        (out / 'report.json').write_text(table.to_json())
        (out / 'report.txt').write_text(text + '\n')
        write_results(results, out / 'results.json')
        plot_dir = out / 'plots'
        plot_dir.mkdir(exist_ok=True)
        made = [plots.plot_variant_miou(results, plot_dir / 'val_miou.png')]
        for v in sweep.variants:
            first = next(r for r in results if r.variant == v.label)
            made.append(plots.plot_loss_components(
                first.metrics, plot_dir / f'loss_{v.slug}.png', f'{v.label} (seed {first.seed})'))
        self.manifest.add(out / 'report.json', out / 'report.txt', out / 'results.json', *made)
        for r in results:
            self.manifest.add(Path(r.out_dir) / MANIFEST_NAME)
        self.log.info(f"Recorded {len(results)} runs")
        return EXIT_OK


def _checkpoint(path: str | None) -> Path:
    if path is None:
        raise UsageError("--checkpoint PATH is required")
    p = Path(path)
    stem = p.with_suffix('') if p.suffix in ('.json', '.bin') else p
    if not stem.with_suffix('.json').is_file() or not stem.with_suffix('.bin').is_file():
        raise UsageError(f"no checkpoint at {stem}(.json|.bin)")
    return stem


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config (see configs/default.json)')
    common.add_argument('--out', help='output directory')
    common.add_argument('--seed', type=int, help='overrides train.seed')
    common.add_argument('--profile', help='dump a cProfile of the command to this path')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true')
    verbosity.add_argument('-q', '--quiet', action='store_true')

    parser = argparse.ArgumentParser(
        prog='ccdistill', description='Day/night correlation distillation on synthetic scenes')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('generate', parents=[common], help='write the four-domain dataset')
    p = sub.add_parser('translate', parents=[common], help='LAB moment-match images')
    p.add_argument('--src', required=True)
    p.add_argument('--tgt', required=True)
    p.add_argument('--per-image', action='store_true',
                   help='match source i to target i mod n instead of the aggregate')
    p = sub.add_parser('train', parents=[common], help='train M_d and M_n')
    p.add_argument('--variant', help='ablation variant (slug or table label)')
    p.add_argument('--checkpoint', help='resume from this checkpoint')
    p = sub.add_parser('eval', parents=[common], help='score a checkpointed M_n')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--dataset', help='dataset directory written by generate')
    p.add_argument('--split', default='eval', choices=('eval', 'eval_alt'))
    p.add_argument('--vis', type=int, default=4,
                   help='colourised prediction maps to write with --out')
    p = sub.add_parser('gradcheck', parents=[common], help='finite-difference gradient check')
    p.add_argument('--coords', type=int, default=32, help='coordinates per tensor')
    p.add_argument('--tolerance', type=float, default=1e-4)
    p.add_argument('--size', type=int, default=8, help='input height and width')
    p = sub.add_parser('ablate', parents=[common], help='run the ablation sweep')
    p.add_argument('--seeds', help='comma separated, overrides train.seeds')
    p.add_argument('--variant', action='append', help='restrict to these variants')
    p.add_argument('--jobs', type=int, default=1, help='parallel training processes')
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    level = lg.DEBUG if args.verbose else lg.WARNING if args.quiet else lg.INFO
    log = RunLogger(level)
    try:
        return Cli(args, log).run()
    except UsageError as e:
        log.error(str(e))
        return EXIT_USAGE
    except (ValidationError, FileNotFoundError) as e:
        log.error(str(e))
        return EXIT_USAGE
    except VerificationFailed as e:
        log.error(str(e))
        return EXIT_VERIFICATION


if __name__ == '__main__':
    sys.exit(main())
