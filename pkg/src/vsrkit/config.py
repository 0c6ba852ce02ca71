"""Run configuration: one JSON document covering data, model, training and decoding."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .decoding import DecodeParams
from .frontend import FrontendConfigError
from .losses import JointLossConfig
from .model import ModelConfig
from .training import OptimizerConfig
from .video import AugmentPolicy


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    vocab: str = "abcdefgh"
    train_count: int = 200
    dev_count: int = 50
    size: int = 32
    frames_per_token: int = 4
    min_tokens: int = 3
    max_tokens: int = 6
    noise: float = 0.05


def _toy_model() -> dict:
    return {
        "frontend": {"block_channels": [4, 8, 8, 16], "num_blocks": 4},
        "encoder": {"variant": "e_branchformer", "layers": 2, "d_model": 32, "heads": 4,
                    "ffn_dim": 64, "cgmlp_expansion": 2, "kernel_size": 7},
        "decoder": {"layers": 2, "heads": 4, "ffn_dim": 64},
        "lm": {"layers": 2, "d_model": 32, "heads": 4, "ffn_dim": 64},
    }


@dataclass
class RunConfig:
    seed: int = 0
    crop_size: int = 32
    speed_rates: list[float] = field(default_factory=lambda: [0.9, 1.0, 1.1])
    augment: dict = field(default_factory=dict)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: dict = field(default_factory=_toy_model)
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(batch_size=2))
    loss: JointLossConfig = field(default_factory=JointLossConfig)
    steps: int = 500
    lm_steps: int = 300
    decode: DecodeParams = field(default_factory=DecodeParams)

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(**self.augment) if self.augment else AugmentPolicy.identity()

    def model_config(self, vocab: list[str]) -> ModelConfig:
        return ModelConfig(vocab=list(vocab), seed=self.seed, crop_size=self.crop_size, **self.model)

    def validate(self) -> "RunConfig":
        """Build every sub-config once so bad values fail at load time."""
        if self.steps < 0 or self.lm_steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.speed_rates or any(r <= 0 for r in self.speed_rates):
            raise ConfigError("speed_rates must be a non-empty list of positive rates")
        s = self.synth
        if self.crop_size > s.size:
            raise ConfigError(f"crop_size {self.crop_size} exceeds synthetic frame size {s.size}")
        try:
            self.policy()
            mc = self.model_config(list(s.vocab))
            mc.frontend_config().spatial_trajectory(self.crop_size)
            mc.encoder_config()
            mc.decoder_config()
            mc.lm_config()
        except (TypeError, ValueError, FrontendConfigError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        nested = {"synth": SynthConfig, "optimizer": OptimizerConfig, "loss": JointLossConfig, "decode": DecodeParams}
        kw = dict(d)
        try:
            for key, typ in nested.items():
                if key in kw:
                    kw[key] = typ(**kw[key])
            if "model" in kw:
                model = _toy_model()
                model.update(kw["model"])
                kw["model"] = model
            return cls(**kw).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(data)
