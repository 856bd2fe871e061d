"""Run configuration shared by the command-line tools."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .engine import PROFILES, AdaptationConfig
from .model import ArchConfig
from .synth import PRESETS


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    batch: int = 8
    domain: str = "source"

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or not self.lr > 0:
            raise ValueError("pretrain steps, batch and lr must be positive")
        if self.domain not in PRESETS:
            raise ValueError(f"unknown domain {self.domain!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    profile: str = "default"
    arch: ArchConfig = field(default_factory=ArchConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    target_domain: str = "ood_both"
    paths: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.target_domain not in PRESETS:
            raise ValueError(f"unknown domain {self.target_domain!r}")
        # the profile's forced settings win over anything in the adaptation block
        fields = {**self.adaptation.to_json(), "profile": self.profile}
        object.__setattr__(self, "adaptation", AdaptationConfig.from_json(fields))

    def to_json(self) -> dict:
        return {"seed": self.seed, "profile": self.profile, "arch": self.arch.to_json(),
                "pretrain": dataclasses.asdict(self.pretrain), "adaptation": self.adaptation.to_json(),
                "target_domain": self.target_domain, "paths": dict(self.paths)}

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(seed=data.get("seed", 0), profile=data.get("profile", "default"),
                   arch=ArchConfig.from_json(data.get("arch", {})),
                   pretrain=PretrainConfig(**data.get("pretrain", {})),
                   adaptation=AdaptationConfig(**data.get("adaptation", {})),
                   target_domain=data.get("target_domain", "ood_both"),
                   paths=dict(data.get("paths", {})))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def stamp(self) -> dict:
        """Provenance fields written into every artifact."""
        return {"config_hash": self.config_hash(), "seed": self.seed}


def load_config(path) -> RunConfig:
    """Read a JSON RunConfig; every entry of ``paths`` must exist."""
    cfg = RunConfig.from_json(json.loads(Path(path).read_text()))
    missing = [f"{k}={v}" for k, v in cfg.paths.items() if not Path(v).exists()]
    if missing:
        raise FileNotFoundError(f"config paths do not exist: {', '.join(missing)}")
    return cfg
