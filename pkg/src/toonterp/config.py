"""Stage configuration and the flat ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

STAGES = ("autoencoder", "rectify", "decoder", "sketch")

LR_SCHEDULES = ("constant", "cosine")

DEFAULT_LR = {"autoencoder": 2e-4, "rectify": 1e-5, "decoder": 4.5e-6, "sketch": 5e-5}


@dataclass
class StageConfig:
    """Hyper-parameters of one training stage.

    Learning rates default to the full-scale values (rectify 1e-5, decoder 4.5e-6,
    sketch 5e-5); desk-scale runs usually override them together with ``steps``.
    """

    stage: str = "rectify"
    steps: int = 100
    learning_rate: float | None = None
    batch_size: int = 4
    freeze_policy: str = "IV"
    seed: int = 0
    audit_every: int = 10
    fps_choices: tuple = (6, 8, 12)
    weight_decay: float = 0.01
    cond_drop: float = 0.1
    decoder_variant: str = "full"
    disc_start: int = 1000
    disc_lr: float = 1e-4
    p_bisection: float = 0.8
    lr_schedule: str = "constant"
    deterministic: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.stage]
        if self.steps < 0 or self.batch_size < 1 or self.audit_every < 1:
            raise ConfigError("steps must be >= 0, batch_size and audit_every >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}; expected one of {LR_SCHEDULES}")
        self.fps_choices = tuple(int(f) for f in self.fps_choices)

    def lr_factor(self, step: int) -> float:
        """Multiplier on ``learning_rate`` at ``step``; cosine decays to zero at ``steps``."""
        if self.lr_schedule == "constant" or self.steps == 0:
            return 1.0
        return 0.5 * (1.0 + math.cos(math.pi * min(step, self.steps) / self.steps))

    @classmethod
    def from_mapping(cls, values: dict) -> "StageConfig":
        return cls(**coerce(cls, values))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _convert(raw, tp):
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if raw.lower() in ("none", "null", ""):
            return None
        tp = next(a for a in args if a is not type(None))
        origin = typing.get_origin(tp)
    if tp is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if tp is tuple or origin is tuple:
        return tuple(int(v) if v.strip().lstrip("-").isdigit() else v.strip()
                     for v in raw.replace(";", ",").split(",") if v.strip())
    return raw


def coerce(cls, values: dict) -> dict:
    """Convert string values to the field types of dataclass ``cls``; unknown keys are an error."""
    hints = typing.get_type_hints(cls)
    unknown = set(values) - set(hints)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    try:
        return {k: _convert(v, hints[k]) for k, v in values.items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_kv(path: str | Path) -> dict[str, str]:
    try:
        return parse_kv(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def dump_kv(values: dict) -> str:
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
