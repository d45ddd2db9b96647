import logging
import pstats
import tempfile
from pathlib import Path
from unittest import TestCase

from perf import CpuProfile


def busy() -> int:
    return sum(i * i for i in range(1000))


class TestCpuProfile(TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test__dumps(self):
        path = self.tmp / 'prof.out'
        with CpuProfile(path, logging.getLogger('test')) as prof:
            busy()
        self.assertTrue(path.is_file())
        pstats.Stats(str(path))
        self.assertIn('busy', prof.summary())

    def test__disabled(self):
        with CpuProfile(None) as prof:
            busy()
        self.assertIsNone(prof.profile)

    def test__no_dump_on_error(self):
        path = self.tmp / 'prof.out'
        with self.assertRaises(ValueError):
            with CpuProfile(path):
                raise ValueError
        self.assertFalse(path.exists())

    def test__always_dump(self):
        path = self.tmp / 'prof.out'
        with self.assertRaises(ValueError):
            with CpuProfile(path, always_dump=True):
                raise ValueError
        self.assertTrue(path.is_file())
