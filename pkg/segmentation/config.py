"""
⚙️ MODEL / LOSS / TRAINING CONFIGURATION
Plain frozen records. JSON validation lives in experiments.forms; these
classes only enforce their own invariants.
"""
from dataclasses import asdict, dataclass, field

from django.conf import settings

from utils.exceptions import ConfigurationError

FULL_SCALE_BOTTLENECK = 1024
FULL_SCALE_PROTO_DIM = 64


def fewshot_setting(key, default):
    return getattr(settings, "FEWSHOT", {}).get(key, default)


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 4
    base_channels: int = 8
    proto_dim: int = 16
    input_size: tuple = field(default=(64, 64))
    full_scale: bool = False

    def __post_init__(self):
        if self.full_scale:
            # Bottleneck width 1024 projected down to 64.
            object.__setattr__(self, "base_channels", FULL_SCALE_BOTTLENECK // 2 ** (self.levels - 1))
            object.__setattr__(self, "proto_dim", FULL_SCALE_PROTO_DIM)
        if self.levels < 2:
            raise ConfigurationError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 2:
            raise ConfigurationError(f"base_channels must be >= 2, got {self.base_channels}")
        if self.proto_dim < 1:
            raise ConfigurationError(f"proto_dim must be >= 1, got {self.proto_dim}")
        if self.input_size is not None:
            size = tuple(int(v) for v in self.input_size)
            object.__setattr__(self, "input_size", size)
            factor = 2 ** self.levels
            if len(size) != 2 or size[0] % factor or size[1] % factor:
                raise ConfigurationError(f"input_size {size} must be divisible by 2^{self.levels}")

    def channels(self, level):
        return self.base_channels * 2 ** level

    @property
    def bottleneck_channels(self):
        return self.channels(self.levels - 1)

    def as_dict(self):
        data = asdict(self)
        data["input_size"] = list(self.input_size) if self.input_size is not None else None
        return data


@dataclass(frozen=True)
class LossConfig:
    """`beta_mode` is "inverse_frequency" (per slice, clamped) or "fixed" (uses `beta`)."""

    beta_mode: str = "inverse_frequency"
    beta: float = 1.0
    beta_min: float = 1.0
    beta_max: float = 100.0
    temperature: float = 1.0
    eps: float = 1e-7
    registry_momentum: float = 0.9

    def __post_init__(self):
        if self.beta_mode not in ("inverse_frequency", "fixed"):
            raise ConfigurationError(f"unknown beta_mode {self.beta_mode!r}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")
        if not 0 <= self.beta_min <= self.beta_max:
            raise ConfigurationError(f"beta clamp [{self.beta_min}, {self.beta_max}] is empty")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.eps < 0.5:
            raise ConfigurationError(f"eps must be in (0, 0.5), got {self.eps}")
        if not 0 <= self.registry_momentum < 1:
            raise ConfigurationError(f"registry_momentum must be in [0, 1), got {self.registry_momentum}")

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 2000
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    weak_support: bool = False
    # 0 disables clipping
    clip_norm: float = field(default_factory=lambda: fewshot_setting("CLIP_NORM", 5.0))

    def __post_init__(self):
        if self.episodes < 0:
            raise ConfigurationError(f"episodes must be >= 0, got {self.episodes}")
        if self.lr < 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.checkpoint_every < 0:
            raise ConfigurationError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.clip_norm < 0:
            raise ConfigurationError(f"clip_norm must be >= 0, got {self.clip_norm}")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be non-negative, got {self.seed}")

    def as_dict(self):
        return asdict(self)
