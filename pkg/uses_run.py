from __future__ import annotations

import datetime
import json
import logging as lg
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, TextIO, Union

if TYPE_CHECKING:
    from config import RunConfig

LOGGER_NAME = 'ccdistill'
MANIFEST_NAME = 'run_manifest.json'


class RunLogger(lg.Logger):
    def __init__(self, level: int = lg.INFO, stream: TextIO = None):
        super().__init__(LOGGER_NAME, level)
        if stream is None:
            stream = sys.stderr
        self._stream_handler = lg.StreamHandler(stream)
        self._formatter = lg.Formatter('[{levelname}] {message}', style='{')
        self._stream_handler.setFormatter(self._formatter)
        self.addHandler(self._stream_handler)
        # module loggers (ccdistill.<module>) live in the logging registry,
        # point them at the same handler
        family = lg.getLogger(LOGGER_NAME)
        family.handlers[:] = [self._stream_handler]
        family.setLevel(level)
        family.propagate = False


@dataclass
class RunContext:
    """What every long-lived component of one command needs"""
    cfg: RunConfig
    out_dir: Path | None
    log: lg.Logger
    progress: bool = False


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds')


@dataclass
class RunManifest:
    """Written to `<out_dir>/run_manifest.json` before a command computes
    anything, completed with its outputs when it ends"""
    command: str
    argv: list[str]
    config: dict
    config_hash: str
    seeds: list[int]
    out_dir: str | None
    started: str = field(default_factory=_now)
    finished: str | None = None
    status: str = 'running'
    outputs: list[str] = field(default_factory=list)

    @property
    def path(self) -> Path | None:
        return None if self.out_dir is None else Path(self.out_dir) / MANIFEST_NAME

    def add(self, *paths: str | Path):
        for p in paths:
            rel = Path(p)
            if self.out_dir is not None and rel.is_relative_to(self.out_dir):
                rel = rel.relative_to(self.out_dir)
            self.outputs.append(str(rel))

    def write(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(asdict(self), indent=2))

    def finish(self, status: str):
        self.finished = _now()
        self.status = status
        self.write()


HasRun = Union['UsesRun', RunContext]


class UsesRun:
    run: RunContext = None

    def __init__(self, run: HasRun | None, strict=True):
        self.set_run(run, strict, '__init__')

    def set_run(self, run: HasRun | None, strict=True, method_name='set_run'):
        if isinstance(run, UsesRun):
            run = run.run
        self.run = run or self.run
        if strict and self.run is None:
            raise RuntimeError(
                f"run needs to be specified when using strict=True "
                f"(either as an attribute before calling "
                f"{method_name} or passed as an argument)")

    @property
    def cfg(self) -> RunConfig:
        return self.run.cfg

    @property
    def out_dir(self) -> Path | None:
        return self.run.out_dir

    @property
    def log(self) -> lg.Logger:
        return self.run.log

    @property
    def progress(self) -> bool:
        return self.run.progress
