"""Run configuration and the closed-form training schedules."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for malformed config files or violated config invariants."""


class ScheduleError(ValueError):
    """Raised when a schedule is evaluated with an invalid iteration state."""


@dataclass(frozen=True)
class TrainConfig:
    image_size: int = 96
    num_classes: int = 2
    lambda_seg: float = 0.5
    lambda_cls: float = 1.0
    alpha: float = 0.8
    beta: float = 0.2
    gamma: float = 0.1
    temp: float = 0.07
    eta_min: float = 0.25
    eta_max: float = 0.75
    lr_init: float = 1e-4
    # None means "same as lr_init"; lets desk-scale runs give the SGD branch a usable step size.
    lr_cls_init: float | None = None
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 8
    total_iters: int = 1000
    eval_interval: int = 100
    pixel_embed_dim: int = 256
    image_embed_dim: int = 128
    anchors_per_batch: int = 256
    anchor_stride: int = 1
    bank_capacity_pixel: int = 4096
    bank_capacity_image: int = 512
    epsilon: float = 1e-8
    seed: int = 0
    seg_width: int = 32
    cls_width: int = 32
    cls_blocks: int = 2
    enable_unlabeled: bool = True
    enable_dtcl: bool = True
    enable_ias: bool = True
    enable_itcl: bool = True
    data_root: str = ""
    n_synth: int = 400
    n_labeled: int = 40
    val_fraction: float = 0.3

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta_min < self.eta_max <= 1.0:
            raise ConfigError(
                f"eta_min/eta_max must satisfy 0 <= eta_min < eta_max <= 1, "
                f"got eta_min={self.eta_min}, eta_max={self.eta_max}"
            )
        if self.temp <= 0:
            raise ConfigError(f"temp must be positive, got {self.temp}")
        if self.batch_size <= 0 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be a positive even number, got {self.batch_size}")
        for name in ("lambda_seg", "lambda_cls", "alpha", "beta", "gamma", "epsilon", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.lr_init < 0 or (self.lr_cls_init is not None and self.lr_cls_init < 0):
            raise ConfigError("learning rates must be non-negative")
        if self.total_iters < 0:
            raise ConfigError(f"total_iters must be non-negative, got {self.total_iters}")
        if self.eval_interval <= 0:
            raise ConfigError(f"eval_interval must be positive, got {self.eval_interval}")
        if self.anchors_per_batch < 0 or self.anchors_per_batch % 2:
            raise ConfigError(f"anchors_per_batch must be even, got {self.anchors_per_batch}")
        if self.anchor_stride < 1:
            raise ConfigError(f"anchor_stride must be >= 1, got {self.anchor_stride}")
        if self.image_size < 16 or self.image_size % 32:
            raise ConfigError(f"image_size must be a multiple of 32, got {self.image_size}")
        if self.num_classes != 2:
            raise ConfigError("only the 2-class (benign/malignant) setting is supported")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")

    @property
    def lr_cls(self) -> float:
        return self.lr_init if self.lr_cls_init is None else self.lr_cls_init

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; equal configs give equal digests."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class ScheduleState:
    iter: int
    total_iters: int

    def __post_init__(self) -> None:
        if self.total_iters <= 0:
            raise ScheduleError(f"total_iters must be positive, got {self.total_iters}")
        if not 0 <= self.iter <= self.total_iters:
            raise ScheduleError(f"iter must lie in [0, {self.total_iters}], got {self.iter}")

    @property
    def progress(self) -> float:
        return self.iter / self.total_iters


def _state(state: ScheduleState | tuple[int, int]) -> ScheduleState:
    if isinstance(state, ScheduleState):
        return state
    return ScheduleState(*state)


def uncertainty_threshold(state: ScheduleState, eta_min: float = 0.25, eta_max: float = 0.75) -> float:
    """Cosine-annealed entropy ceiling, from ``eta_max`` at iteration 0 to ``eta_min`` at the end."""
    s = _state(state)
    return eta_min + 0.5 * (eta_max - eta_min) * (math.cos(math.pi * s.progress) + 1.0)


def confidence_threshold(state: ScheduleState) -> float:
    """Confidence floor rising from 0.75 + 0.25 e^-0.5 ln2 to 0.75 + 0.25 ln2."""
    s = _state(state)
    return 0.75 + 0.25 * math.exp(-0.5 * (1.0 - s.progress) ** 2) * math.log(2.0)


def poly_lr(state: ScheduleState, lr_init: float) -> float:
    s = _state(state)
    return lr_init * (1.0 - s.progress) ** 0.9


def _coerce(name: str, raw: str, default: Any) -> Any:
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    if name == "lr_cls_init":
        return None if text.lower() in ("", "none", "null") else float(text)
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}


def parse_assignments(pairs: list[tuple[str, str]], base: TrainConfig | None = None) -> TrainConfig:
    """Apply ``(key, raw_value)`` pairs on top of ``base`` with type coercion and validation."""
    values = (base or TrainConfig()).to_dict()
    for key, raw in pairs:
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown config key: {key!r}")
        try:
            values[key] = _coerce(key, raw, _DEFAULTS[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return TrainConfig(**values)


def parse_config_text(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        # several assignments may share a line when comma separated
        for item in body.split(",") if body.count("=") > 1 else [body]:
            if "=" not in item:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
            key, value = item.split("=", 1)
            pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path: str | Path) -> TrainConfig:
    """Read a flat ``key = value`` config file; missing keys take their defaults."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_assignments(parse_config_text(text))


def dump_config(config: TrainConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if value is None:
            value = "none"
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
