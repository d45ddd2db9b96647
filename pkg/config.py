"""Run configuration: one JSON file with a `world` and a `train` section.
Missing keys take the module defaults; unknown keys are an error."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from synthdomains import WorldConfig
from trainer import TrainConfig
from util import ValidationError, content_hash

SECTIONS = ('world', 'train')


class UsageError(ValueError):
    """Bad config, bad paths or bad flags; the CLI exits with code 2"""


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {'world': self.world.to_dict(), 'train': self.train.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def hash(self) -> str:
        return content_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunConfig:
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise UsageError(f"unknown config sections {sorted(unknown)}")
        try:
            world = WorldConfig.from_dict(d.get('world', {}))
            train = TrainConfig.from_dict(d.get('train', {}))
        except (TypeError, KeyError, ValidationError) as e:
            # TypeError: unknown key reaching a dataclass constructor
            raise UsageError(f"invalid config: {e}") from e
        return cls(world, train)

    def with_train(self, **changes) -> RunConfig:
        try:
            return replace(self, train=replace(self.train, **changes))
        except ValidationError as e:
            raise UsageError(str(e)) from e


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} does not exist")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{p} is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise UsageError(f"{p} must hold a JSON object")
    return RunConfig.from_dict(d)
