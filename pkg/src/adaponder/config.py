"""Configuration dataclasses shared by training, inference and analysis."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

from .errors import ConfigError

ADAPTIVE = "adaptive"
FIXED = "fixed"
_MODES = (ADAPTIVE, FIXED)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 259
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 0  # 0 -> SwiGLU default of ~8/3 * d_model
    max_position: int = 2048
    rope_base: float = 10000.0
    # latent slots reuse the parent token's rotary index unless this is set
    distinct_slot_positions: bool = False
    attention: str = "augmented"  # or "soft"
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "max_position"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.n_layers < 0:
            raise ConfigError("model.n_layers must be nonnegative")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"model.d_model={self.d_model} is not divisible by model.n_heads={self.n_heads}"
            )
        if self.attention not in ("augmented", "soft"):
            raise ConfigError(f"model.attention must be 'augmented' or 'soft', got {self.attention!r}")
        if self.d_head % 2:
            raise ConfigError("rotary embeddings need an even head dimension")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        if self.d_ff:
            return self.d_ff
        return 16 * ((8 * self.d_model // 3 + 15) // 16)


@dataclass(frozen=True)
class PonderSettings:
    """Pondering hyperparameters.

    ``max_steps`` is K, the maximum number of additional latent steps per token.
    ``mode='fixed'`` pins the step distribution to a one-hot at K, which turns
    the model into a uniform-depth pondering baseline.
    """

    max_steps: int = 3
    tau: float = 1e-4
    lam: float = 0.01
    jacobi_iters: int = 3
    mode: str = ADAPTIVE
    latent_init: str = "embedding"  # or "zeros"

    def __post_init__(self) -> None:
        if self.max_steps < 0:
            raise ConfigError("ponder.max_steps must be >= 0")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("ponder.tau must lie in (0, 1)")
        if self.lam < 0:
            raise ConfigError("ponder.lam must be >= 0")
        if not 1 <= self.jacobi_iters <= 16:
            raise ConfigError("ponder.jacobi_iters must lie in 1..16")
        if self.mode not in _MODES:
            raise ConfigError(f"ponder.mode must be one of {_MODES}, got {self.mode!r}")
        if self.latent_init not in ("embedding", "zeros"):
            raise ConfigError("ponder.latent_init must be 'embedding' or 'zeros'")

    @property
    def fixed(self) -> bool:
        return self.mode == FIXED

    def replace(self, **changes: Any) -> "PonderSettings":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    min_lr_ratio: float = 0.1
    warmup_steps: int = 50
    batch_size: int = 8
    seq_len: int = 64
    steps: int = 600
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0
    seed: int = 0
    eval_interval: int = 0
    eval_tokens: int = 2048
    data_path: str = ""
    heldout_fraction: float = 0.1
    grad_through_iters: bool = True

    def __post_init__(self) -> None:
        positive = ("lr", "batch_size", "seq_len", "steps")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigError("data.heldout_fraction must lie in (0, 1)")
        object.__setattr__(self, "betas", tuple(self.betas))


def to_dict(cfg: Any) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def from_dict(cls: type, data: dict[str, Any], section: str = "") -> Any:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        prefix = f"{section}." if section else ""
        raise ConfigError(f"unknown key {prefix}{unknown[0]}")
    return cls(**data)


__all__ = [
    "ADAPTIVE",
    "FIXED",
    "ModelConfig",
    "PonderSettings",
    "TrainConfig",
    "to_dict",
    "from_dict",
]
