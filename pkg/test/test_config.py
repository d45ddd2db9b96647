import json
import tempfile
from pathlib import Path
from unittest import TestCase

from config import RunConfig, UsageError, load_config

CONFIGS = Path(__file__).resolve().parent.parent / 'configs'


class TestLoadConfig(TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def write(self, text: str) -> Path:
        p = self.tmp / 'cfg.json'
        p.write_text(text)
        return p

    def test__defaults(self):
        cfg = load_config(None)
        self.assertEqual(cfg, RunConfig())
        self.assertEqual(cfg.train.base_lr, 2.5e-4)

    def test__partial(self):
        cfg = load_config(self.write('{"train": {"max_iters": 7}}'))
        self.assertEqual(cfg.train.max_iters, 7)
        self.assertEqual(cfg.world, RunConfig().world)

    def test__errors(self):
        cases = {
            'missing': self.tmp / 'nope.json',
            'bad json': self.write('{"train": '),
        }
        for name, path in cases.items():
            with self.subTest(name=name):
                with self.assertRaises(UsageError):
                    load_config(path)
        for text in ('[1, 2]', '{"optim": {}}', '{"train": {"learning_rate": 1}}',
                     '{"world": {"colour": 1}}', '{"train": {"base_lr": -1}}'):
            with self.subTest(text=text):
                with self.assertRaises(UsageError):
                    load_config(self.write(text))

    def test__shipped_configs(self):
        cfg = load_config(CONFIGS / 'default.json')
        self.assertEqual(cfg.train.base_lr, 0.005)
        self.assertEqual(cfg.world, RunConfig().world)
        alt = load_config(CONFIGS / 'generalization.json')
        self.assertTrue(alt.world.has_alt)

    def test__json_round_trip(self):
        cfg = load_config(CONFIGS / 'generalization.json')
        again = RunConfig.from_dict(json.loads(cfg.to_json()))
        self.assertEqual(again, cfg)
        self.assertEqual(again.hash, cfg.hash)


class TestRunConfig(TestCase):
    def test__hash(self):
        a = RunConfig()
        self.assertEqual(a.hash, RunConfig().hash)
        self.assertNotEqual(a.hash, a.with_train(seed=1).hash)

    def test__with_train(self):
        self.assertEqual(RunConfig().with_train(seeds=(5,)).train.seeds, (5,))
        with self.assertRaises(UsageError):
            RunConfig().with_train(max_iters=0)
