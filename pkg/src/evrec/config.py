"""Experiment configuration: one JSON document covering every stage.

Unknown keys are rejected so a typo cannot silently fall back to a
default. ``ExperimentConfig().to_dict()`` is the documented schema.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .agent import AGENT_KINDS, Stage1Config, canonical_agent
from .bench import world_from_dict, world_to_dict
from .edl import TrainConfig
from .errors import SchemaVersionError
from .fusion import KINDS as FUSION_KINDS, canonical
from .policy import PPOConfig
from .world import WorldConfig

CONFIG_VERSION = 1


@dataclass
class BenchConfig:
    n: int = 2000
    seed: int = 7


@dataclass
class EvalConfig:
    agents: list = field(default_factory=lambda: list(AGENT_KINDS))
    fusions: list = field(default_factory=lambda: list(FUSION_KINDS))
    sigmas: list = field(default_factory=lambda: [0.0])
    seeds: list = field(default_factory=lambda: [0])
    horizon: int = 10

    def __post_init__(self):
        self.agents = [canonical_agent(a) for a in self.agents]
        self.fusions = [canonical(f) for f in self.fusions]
        self.sigmas = [float(s) for s in self.sigmas]
        if any(s < 0 for s in self.sigmas):
            raise ValueError("sigmas must be non-negative")
        if not self.agents or not self.fusions or not self.sigmas or not self.seeds:
            raise ValueError("evaluation matrix has an empty axis")


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    recognizer: TrainConfig = field(default_factory=TrainConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    policy: PPOConfig = field(default_factory=PPOConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def to_dict(self):
        d = {"version": CONFIG_VERSION, "seed": self.seed, "out_dir": self.out_dir,
             "world": world_to_dict(self.world)}
        for name in ("bench", "recognizer", "stage1", "policy", "evaluation"):
            d[name] = dataclasses.asdict(getattr(self, name))
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise SchemaVersionError(f"config version {version!r}, expected {CONFIG_VERSION}")
        sections = {"bench": BenchConfig, "recognizer": TrainConfig, "stage1": Stage1Config,
                    "policy": PPOConfig, "evaluation": EvalConfig}
        unknown = set(d) - set(sections) - {"world", "seed", "out_dir"}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        kw = {k: _build(c, d[k], k) for k, c in sections.items() if k in d}
        if "world" in d:
            kw["world"] = world_from_dict(d["world"])
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        if "out_dir" in d:
            kw["out_dir"] = str(d["out_dir"])
        return cls(**kw)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path):
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(data)
