import logging
import math
import tempfile
import warnings
from pathlib import Path
from unittest import TestCase, mock

import numpy as np
import torch

import segnet
import trainer
from config import RunConfig
from imagecore import LabelMap, IGNORE_INDEX
from objective import StaticClassSet
from segnet import DTYPE, predict
from synthdomains import SyntheticWorld, WorldConfig
from trainer import (TrainConfig, TrainState, Trainer, TrainingDiverged, NonFiniteGradient,
                     poly_lr, sgd_step, class_weights_from_labels, compute_losses, comparable,
                     check_gradients, grad_check, load_night_model)
from uses_run import RunContext, RunLogger
from util import ValidationError


def small_config(**train) -> RunConfig:
    world = WorldConfig(height=16, width=16, train_images=4, eval_images=2)
    args = dict(max_iters=3, batch_size=1, width=4, tap_channels=4, embed_dim=8,
                class_weight_scenes=4, eval_every=0, log_every=0, prefetch=0, seeds=(0,))
    args.update(train)
    return RunConfig(world, TrainConfig(**args))


def context(cfg: RunConfig, out_dir=None) -> RunContext:
    return RunContext(cfg, None if out_dir is None else Path(out_dir),
                      RunLogger(logging.CRITICAL))


class TestPolyLr(TestCase):
    def test_values(self):
        cfg = TrainConfig(base_lr=0.01, max_iters=100, poly_power=0.9)
        self.assertEqual(poly_lr(0, cfg), 0.01)
        self.assertAlmostEqual(poly_lr(50, cfg), 0.01 * 0.5 ** 0.9)
        self.assertEqual(poly_lr(100, cfg), 0.0)

    def test_default_base(self):
        self.assertEqual(poly_lr(0, TrainConfig()), 2.5e-4)

    def test_out_of_range(self):
        cfg = TrainConfig(max_iters=10)
        for it in (-1, 11):
            with self.subTest(it=it):
                with self.assertRaises(ValidationError):
                    poly_lr(it, cfg)


class TestSgdStep(TestCase):
    def make(self, momentum=0.9, wd=0.1):
        p = torch.tensor([1.0], dtype=DTYPE, requires_grad=True)
        opt = torch.optim.SGD([p], lr=1.0, momentum=momentum, weight_decay=wd)
        return p, opt

    def test_closed_form(self):
        p, opt = self.make()
        g = {'p': torch.tensor([2.0], dtype=DTYPE)}
        sgd_step(opt, {'p': p}, g, lr=0.5)
        self.assertAlmostEqual(p.item(), -0.05)
        sgd_step(opt, {'p': p}, g, lr=0.5)
        self.assertAlmostEqual(p.item(), -1.9925)
        self.assertIsNone(p.grad)

    def test_zero_gradient_without_decay(self):
        p, opt = self.make(momentum=0.0, wd=0.0)
        sgd_step(opt, {'p': p}, {'p': torch.zeros(1, dtype=DTYPE)}, lr=0.5)
        self.assertEqual(p.item(), 1.0)

    def test_missing_gradient(self):
        p, opt = self.make()
        with self.assertRaises(ValidationError):
            sgd_step(opt, {'p': p}, {}, lr=0.1)

    def test_non_finite_gradient(self):
        p, opt = self.make()
        with self.assertRaises(NonFiniteGradient):
            sgd_step(opt, {'p': p}, {'p': torch.tensor([math.inf], dtype=DTYPE)}, lr=0.1)
        self.assertEqual(p.item(), 1.0)


class TestTrainConfig(TestCase):
    def test_dict_round_trip(self):
        cfg = TrainConfig(seeds=(4, 5), no_cds=True, head_hidden=12)
        self.assertEqual(TrainConfig.from_dict(cfg.to_dict()), cfg)

    def test_unknown_key(self):
        with self.assertRaises(ValidationError):
            TrainConfig.from_dict({'learning_rate': 0.1})

    def test_with_flags_resets(self):
        cfg = TrainConfig(no_cdc=True).with_flags(no_cds=True)
        self.assertFalse(cfg.no_cdc)
        self.assertTrue(cfg.no_cds)
        self.assertEqual(TrainConfig().with_flags(no_cdc=True, no_cds=True).flags['no_cdc'], True)
        with self.assertRaises(ValidationError):
            cfg.with_flags(no_everything=True)

    def test_invalid(self):
        for kwargs in ({'base_lr': 0.0}, {'momentum': -0.1}, {'max_iters': 0},
                       {'tau': 1.1}, {'tap_layer': 'dec2'}, {'lambda1': -1.0},
                       {'eval_every': -1}):
            with self.subTest(**kwargs):
                with self.assertRaises(ValidationError):
                    TrainConfig(**kwargs)

    def test_zero_momentum_and_decay_allowed(self):
        TrainConfig(momentum=0.0, weight_decay=0.0)


class TestClassWeights(TestCase):
    def test_from_labels(self):
        lb = LabelMap(np.array([[0, 0], [0, 1], [IGNORE_INDEX, IGNORE_INDEX]]), 3)
        w = class_weights_from_labels([lb], 3)
        expected = [1 / math.log(1.02 + f) for f in (0.75, 0.25, 0.0)]
        for got, want in zip(w.weights, expected):
            self.assertAlmostEqual(got, want)

    def test_no_pixels(self):
        lb = LabelMap(np.full((2, 2), IGNORE_INDEX), 3)
        with self.assertRaises(ValidationError):
            class_weights_from_labels([lb], 3)


class TestComputeLosses(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cfg = small_config().train
        wcfg = small_config().world
        world = SyntheticWorld(wcfg, 0)
        cls.quad = world.quad_batch(0, 2)
        cls.statics = StaticClassSet(wcfg.static_classes, wcfg.num_classes)
        cls.w = class_weights_from_labels(world.source_labels(4), wcfg.num_classes)

    def losses(self, state, **flags):
        cfg = self.cfg.with_flags(**flags)
        return compute_losses(state, self.quad, cfg, self.w, self.statics)

    def test_flags_are_orthogonal(self):
        state = TrainState.create(self.cfg, 8)
        full, aux = self.losses(state)
        no_cds, _ = self.losses(state, no_cds=True)
        self.assertEqual(no_cds.cds.item(), 0.0)
        for name in ('seg_n', 'seg_d', 'pseudo', 'cdc'):
            with self.subTest(name=name):
                self.assertEqual(getattr(no_cds, name).item(), getattr(full, name).item())
        no_ljs, _ = self.losses(state, no_ljs=True)
        self.assertAlmostEqual(no_ljs.cdc.item(), full.cdc.item() - aux['cdc_js'], places=10)
        self.assertEqual(no_ljs.cds.item(), full.cds.item())

    def test_no_cdc_and_cds(self):
        state = TrainState.create(self.cfg, 8)
        comps, _ = self.losses(state, no_cdc=True, no_cds=True)
        self.assertEqual(comps.cdc.item(), 0.0)
        self.assertEqual(comps.cds.item(), 0.0)
        self.assertGreater(comps.seg_d.item(), 0.0)

    def test_source_only(self):
        state = TrainState.create(self.cfg.with_flags(source_only=True), 8)
        comps, aux = self.losses(state, source_only=True)
        self.assertGreater(comps.seg_n.item(), 0.0)
        for name in ('seg_d', 'pseudo', 'cdc', 'cds'):
            self.assertEqual(getattr(comps, name).item(), 0.0)
        self.assertEqual(aux, {})

    def test_without_project_head(self):
        state = TrainState.create(self.cfg.with_flags(no_project_head=True), 8)
        self.assertIsNone(state.m_d.head)
        comps, _ = self.losses(state, no_project_head=True)
        self.assertTrue(math.isfinite(comps.cdc.item()))


class TestTrainer(TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_needs_run(self):
        with self.assertRaises(RuntimeError):
            Trainer(None)

    def test_single_iteration(self):
        t = Trainer(context(small_config(max_iters=1), self.tmp))
        state = t.train()
        self.assertEqual(state.iteration, 1)
        self.assertEqual(len(state.history), 1)
        record = state.history[0]
        self.assertEqual(record['iter'], 0)
        self.assertEqual(record['lr'], 2.5e-4)
        self.assertIn('val_miou', record)
        self.assertTrue((self.tmp / 'metrics.jsonl').is_file())
        self.assertTrue((self.tmp / 'checkpoints' / 'final.bin').is_file())

    def test_records_without_grad_warnings(self):
        with warnings.catch_warnings():
            warnings.filterwarnings('error', message='.*requires_grad.*', category=UserWarning)
            state = Trainer(context(small_config(max_iters=1), self.tmp)).train()
        self.assertIsInstance(state.history[0]['cdc_illu'], float)

    def test_steps_change_both_models(self):
        t = Trainer(context(small_config(max_iters=1)))
        state = t.init_state()
        before = {n: p.clone() for br in state.branches for n, p in br.named_params().items()}
        t.train(state)
        for br in state.branches:
            with self.subTest(branch=br.name):
                self.assertFalse(torch.equal(br.net.enc1.weight, before[f'{br.name}.net.enc1.weight']))

    def test_source_only_leaves_day_model(self):
        t = Trainer(context(small_config(max_iters=1, source_only=True)))
        state = t.init_state()
        before = state.m_d.net.enc1.weight.clone()
        t.train(state)
        self.assertTrue(torch.equal(state.m_d.net.enc1.weight, before))

    def test_deterministic(self):
        a = Trainer(context(small_config())).train()
        b = Trainer(context(small_config(prefetch=2))).train()
        self.assertEqual(comparable(a.history), comparable(b.history))

    def test_resume_matches_uninterrupted(self):
        cfg = small_config(max_iters=4, checkpoint_every=2)
        full = Trainer(context(cfg, self.tmp / 'full')).train()
        ckpt = self.tmp / 'full' / 'checkpoints' / 'iter_000002'
        state = TrainState.load(ckpt)
        self.assertEqual(state.iteration, 2)
        resumed = Trainer(context(cfg, self.tmp / 'resumed')).train(state)
        self.assertEqual(comparable(resumed.history), comparable(full.history))
        for name, p in full.named_tensors().items():
            with self.subTest(tensor=name):
                self.assertTrue(torch.equal(p, resumed.named_tensors()[name]))

    def test_nothing_to_do(self):
        t = Trainer(context(small_config(max_iters=1)))
        state = t.train()
        self.assertIs(t.train(state), state)
        self.assertEqual(len(state.history), 1)

    def test_records_reach_callback(self):
        seen = []
        Trainer(context(small_config(max_iters=2))).train(on_record=seen.append)
        self.assertEqual([r['iter'] for r in seen], [0, 1])
        self.assertIn('wall_time', seen[0])
        self.assertNotIn('wall_time', comparable(seen)[0])

    def test_divergence_saves_pre_nan(self):
        def nan_grads(loss, params, retain_graph=False):
            return {n: torch.full_like(p, math.nan) for n, p in params.items()}

        t = Trainer(context(small_config(max_iters=2), self.tmp))
        with mock.patch.object(trainer, 'backward', side_effect=nan_grads):
            with self.assertRaises(TrainingDiverged) as cm:
                t.train()
        self.assertEqual(cm.exception.checkpoint, self.tmp / 'checkpoints' / 'pre_nan')
        self.assertEqual(TrainState.load(cm.exception.checkpoint).iteration, 0)

    def test_night_model_from_checkpoint(self):
        t = Trainer(context(small_config(max_iters=1), self.tmp))
        state = t.train()
        net = load_night_model(self.tmp / 'checkpoints' / 'final')
        images = t.world.eval_split(2).images
        for a, b in zip(predict(net, images), predict(state.m_n.net, images)):
            np.testing.assert_array_equal(a, b)


class TestCheckGradients(TestCase):
    def setUp(self):
        self.w = torch.tensor([1.0, -2.0, 3.0], dtype=DTYPE, requires_grad=True)
        self.c = torch.tensor([0.5, 0.25, -1.0], dtype=DTYPE)

    def losses(self):
        return {'quad': (self.w ** 2).sum(), 'lin': (self.c * self.w).sum()}

    def test_smooth_toy_passes(self):
        report = check_gradients(self.losses, {'w': self.w}, n_coords=3, tolerance=1e-6)
        self.assertTrue(report.passed)
        self.assertEqual(report.components, ['quad', 'lin'])
        self.assertEqual(report.entries[0].n_coords, 3)

    def test_wrong_gradient_fails(self):
        def doubled(loss, params, retain_graph=False):
            return {n: 2 * g for n, g in segnet.backward(loss, params, retain_graph).items()}

        with mock.patch.object(trainer, 'backward', side_effect=doubled):
            report = check_gradients(self.losses, {'w': self.w}, n_coords=3)
        self.assertFalse(report.passed)
        self.assertIn('FAIL', report.format())

    def test_kink_is_resampled(self):
        w = torch.tensor([1e-6, 2.0, 3.0], dtype=DTYPE, requires_grad=True)
        report = check_gradients(lambda: {'relu': torch.relu(w).sum()}, {'w': w}, n_coords=2)
        self.assertTrue(report.passed, report.format())
        self.assertIn(report.entries[0].kinks, (0, 1))
        self.assertEqual(report.entries[0].n_coords, 2)

    def test_all_kinks_fails(self):
        w = torch.tensor([1e-6, -1e-6, 2e-6], dtype=DTYPE, requires_grad=True)
        report = check_gradients(lambda: {'relu': torch.relu(w).sum()}, {'w': w}, n_coords=3)
        entry = report.entries[0]
        self.assertEqual(entry.n_coords, 0)
        self.assertEqual(entry.kinks, 3)
        self.assertEqual(report.max_error(), 0.0)
        self.assertFalse(report.passed)
        self.assertIn('SHORT', report.format())

    def test_parameters_restored(self):
        check_gradients(self.losses, {'w': self.w}, n_coords=3)
        self.assertEqual(self.w.tolist(), [1.0, -2.0, 3.0])


class TestGradCheck(TestCase):
    def test_small_model_passes(self):
        cfg = TrainConfig(batch_size=1, width=2, tap_channels=2, embed_dim=4)
        report = grad_check(cfg, n_coords=2, size=8)
        self.assertEqual(report.components, ['seg_n', 'seg_d', 'pseudo', 'cdc', 'cds', 'total'])
        self.assertTrue(report.passed, report.format())

    def test_pseudo_term_is_live(self):
        seen = []

        def spy(*args, **kwargs):
            comps, aux = compute_losses(*args, **kwargs)
            seen.append((kwargs['pseudo'], float(comps.pseudo.detach())))
            return comps, aux

        cfg = TrainConfig(seed=0, batch_size=1, width=2, tap_channels=2, embed_dim=4)
        with mock.patch.object(trainer, 'compute_losses', side_effect=spy):
            grad_check(cfg, n_coords=1, size=8)
        pseudo, value = seen[0]
        self.assertTrue(bool((pseudo != IGNORE_INDEX).all()))
        self.assertGreater(value, 0.0)

    def test_surrogate_labels(self):
        logits = torch.zeros(2, 5, 4, 4, dtype=DTYPE)
        a = trainer.surrogate_pseudo_labels(logits, 3)
        self.assertEqual(tuple(a.shape), (2, 4, 4))
        self.assertTrue(bool(((a >= 0) & (a < 5)).all()))
        self.assertTrue(torch.equal(a, trainer.surrogate_pseudo_labels(logits, 3)))
