"""Training configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossConfig
from .network import ATTENTION_MODES, HourglassConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # data
    dataset_root: str = ""
    image_size: int = 128
    stride: int = 4
    num_classes: int = 1
    flip: bool = True
    # optimisation
    batch_size: int = 4
    epochs: int = 100
    max_steps: int = 0  # 0: no step limit
    learning_rate: float = 0.001
    seed: int = 0
    # model
    attention: str = "lgsa"
    num_stages: int = 3
    base_channels: int = 32
    num_skip_points: int = 3
    embed_dim: int = 64
    num_heads: int = 1
    pam_channels: int = 16
    max_tokens: int = 1024
    # loss
    alpha: float = 2.0
    beta: float = 4.0
    lambda_b: float = 1.0
    lambda_o: float = 0.1
    loss_eps: float = 1e-7
    # decoding / evaluation
    score_threshold: float = 0.25
    top_k: int = 256
    eval_every: int = 1  # epochs; 0 disables per-epoch evaluation
    eval_split: str = "test"
    # output
    checkpoint_dir: str = "run"
    checkpoint_every: int = 0  # steps; 0: only at the end

    def __post_init__(self):
        positive = ("image_size", "stride", "num_classes", "batch_size", "epochs", "num_stages",
                    "base_channels", "embed_dim", "num_heads", "pam_channels", "max_tokens", "top_k")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("max_steps", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        mult = self.model_config().required_multiple
        if self.image_size % mult:
            raise ConfigError(f"image_size {self.image_size} must be a multiple of {mult}")
        self.loss_config()

    def model_config(self) -> HourglassConfig:
        try:
            return HourglassConfig(
                num_stages=self.num_stages,
                base_channels=self.base_channels,
                num_skip_points=self.num_skip_points,
                stride=self.stride,
                num_classes=self.num_classes,
                attention_mode=self.attention,
                embed_dim=self.embed_dim,
                num_heads=self.num_heads,
                pam_channels=self.pam_channels,
                max_tokens=self.max_tokens,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def loss_config(self) -> LossConfig:
        try:
            return LossConfig(self.alpha, self.beta, self.lambda_b, self.lambda_o, self.loss_eps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)


# Small settings for a single CPU core; the defaults above follow the full-size setup.
PRESETS: dict[str, dict] = {
    "desk": dict(base_channels=16, embed_dim=32, pam_channels=8, epochs=20, eval_every=5),
    "overfit": dict(base_channels=16, embed_dim=32, pam_channels=8, epochs=300, eval_every=0, flip=False),
    "tiny": dict(image_size=64, num_stages=2, num_skip_points=2, base_channels=8, embed_dim=8,
                 pam_channels=4, epochs=2, eval_every=1),
}


def _coerce(raw: str, kind, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments, blank lines ignored)."""
    kinds = {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(TrainConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(raw, kinds[key], key)
    base = base or TrainConfig()
    return base.replace(**values)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), base)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
