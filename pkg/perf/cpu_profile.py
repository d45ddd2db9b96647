from __future__ import annotations

import contextlib
import cProfile
import io
import logging
import pstats
from pathlib import Path


class CpuProfile(contextlib.AbstractContextManager):
    """Profile the enclosed block and dump the stats to `dump_to`
    (nothing happens when it is None)"""

    def __init__(self, dump_to: str | Path | None, log: logging.Logger | None = None,
                 always_dump=False, top: int = 15):
        self.dump_to = dump_to
        self.profile = cProfile.Profile() if dump_to is not None else None
        self.log = log
        self.always_dump = always_dump
        self.top = top

    def __enter__(self):
        if self.profile is not None:
            self.profile.enable()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.profile is None:
            return None
        self.profile.disable()
        if self.always_dump or exc_type is None:
            self.profile.dump_stats(str(self.dump_to))
            if self.log is not None:
                self.log.info(f"CPU profile dumped to {self.dump_to}")
                self.log.debug(self.summary())
        return None

    def summary(self) -> str:
        buf = io.StringIO()
        pstats.Stats(self.profile, stream=buf).sort_stats('cumulative').print_stats(self.top)
        return buf.getvalue()
