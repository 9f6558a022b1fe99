"""One JSON document describing a run: model, adapter policy, training, sampling, data and adapters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .adapters import BlockRankPolicy
from .errors import ConfigError
from .sampler import SamplerConfig
from .train import TrainConfig
from .unet import UNetConfig


@dataclass
class AdapterRef:
    path: str
    strength: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "AdapterRef":
        """``path`` or ``path:strength``."""
        head, sep, tail = text.rpartition(":")
        if sep and head:
            try:
                return cls(head, float(tail))
            except ValueError:
                pass
        return cls(text, 1.0)


@dataclass
class ExperimentConfig:
    model: UNetConfig = field(default_factory=UNetConfig)
    policy: BlockRankPolicy = field(default_factory=BlockRankPolicy.full)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    dataset: str | None = None
    reg_dataset: str | None = None
    adapters: list[AdapterRef] = field(default_factory=list)
    prompt: str = ""
    negative_prompt: str = ""

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "policy": self.policy.to_dict(),
            "train": self.train.to_dict(),
            "sampler": self.sampler.to_dict(),
            "dataset": self.dataset,
            "reg_dataset": self.reg_dataset,
            "adapters": [{"path": a.path, "strength": a.strength} for a in self.adapters],
            "prompt": self.prompt,
            "negative_prompt": self.negative_prompt,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        if "model" in data:
            cfg.model = UNetConfig.from_dict(data["model"])
        if "policy" in data:
            cfg.policy = BlockRankPolicy.from_dict(data["policy"])
        if "train" in data:
            cfg.train = TrainConfig.from_dict(data["train"])
        if "sampler" in data:
            cfg.sampler = SamplerConfig.from_dict(data["sampler"])
        for key in ("dataset", "reg_dataset", "prompt", "negative_prompt"):
            if key in data:
                setattr(cfg, key, data[key])
        refs = []
        for item in data.get("adapters", []):
            if isinstance(item, str):
                refs.append(AdapterRef.parse(item))
                continue
            extra = set(item) - {"path", "strength"}
            if extra:
                raise ConfigError(f"unknown adapter keys: {sorted(extra)}")
            refs.append(AdapterRef(item["path"], float(item.get("strength", 1.0))))
        cfg.adapters = refs
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(data)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))
