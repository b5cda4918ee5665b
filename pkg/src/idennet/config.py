"""Run configuration and the flat ``key=value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

DEPTH_TO_LAYERS = {40: 6, 22: 3, 16: 2}


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 40
    growth_rate: int = 12
    initial_channels: int = 16

    def __post_init__(self):
        if self.depth not in DEPTH_TO_LAYERS:
            raise ValueError(f"unknown depth {self.depth}; expected one of {sorted(DEPTH_TO_LAYERS)}")

    @property
    def layers_per_block(self) -> int:
        return DEPTH_TO_LAYERS[self.depth]

    @property
    def stream_channels(self) -> int:
        """Channels of the stream output after block 2 (D)."""
        return self.initial_channels + 2 * self.layers_per_block * self.growth_rate

    @property
    def head_channels(self) -> int:
        """Channels after the third / fusion dense block."""
        return self.stream_channels + self.layers_per_block * self.growth_rate


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    gamma: float = 15.0
    num_expressions: int = 6
    num_identities: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("alpha and gamma must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "finetune"
    base_lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int | None = None
    dropout: float = 0.5
    seed: int = 0
    val_fraction: float = 0.1
    augment: bool = True
    train_crop: str = "random"
    folds: int = 10

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"stage must be pretrain or finetune, got {self.stage!r}")
        if self.train_crop not in ("random", "center"):
            raise ValueError(f"train_crop must be random or center, got {self.train_crop!r}")
        if self.base_lr is None:
            object.__setattr__(self, "base_lr", 0.1 if self.stage == "pretrain" else 0.01)
        if self.epochs is None:
            object.__setattr__(self, "epochs", 60 if self.stage == "pretrain" else 100)


def _coerce(value: str, annotation: str) -> Any:
    if "bool" in annotation:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if "int" in annotation and "float" not in annotation:
        return int(value)
    if "float" in annotation:
        return float(value)
    return value.strip()


def from_mapping(cls, values: Mapping[str, Any], **overrides):
    """Build dataclass ``cls`` from the subset of ``values`` naming its fields."""
    kwargs = {}
    for f in fields(cls):
        if f.name in overrides and overrides[f.name] is not None:
            kwargs[f.name] = overrides[f.name]
        elif f.name in values:
            raw = values[f.name]
            kwargs[f.name] = _coerce(raw, str(f.type)) if isinstance(raw, str) else raw
    return cls(**kwargs)


def read_config(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_config(path: str | Path, *configs) -> None:
    lines = []
    for cfg in configs:
        for key, value in dataclasses.asdict(cfg).items():
            lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
