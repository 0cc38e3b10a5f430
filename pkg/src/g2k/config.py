"""Configuration dataclasses shared by the model, trainer and CLI.

Values are plain floats/ints/strings so a config can round-trip through the
key=value file format and be hashed stably. Validation happens in validate()
rather than __post_init__ so partially-built configs (e.g. during CLI merge)
do not explode early.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

VARIANTS = ("g_lstm", "mc", "mcr_n", "mcr_mp", "mcr_mpc")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration values."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    hidden_size must divide evenly into num_blocks slices, and the cell input
    width must divide by num_blocks * block_skip (checked in validate).
    """

    variant: str = "mcr_mp"
    hidden_size: int = 128
    num_blocks: int = 4
    block_skip: int = 4
    cell_units: int = 2
    embed_pos: int = 32
    embed_vis: int = 32
    feature_dim: int = 10
    zones: int = 8
    grid_size: int = 4
    cell_channels: int = 16
    static_input_dim: int = 32
    static_hidden: int = 64
    lambda_reg: float = 0.0005
    neighborhood_size: int = 32
    obs_len: int = 8
    pred_len: int = 12
    tau: float = -1.0  # -1 means 1/N at runtime
    self_loops: bool = True
    attention_enabled: bool = True
    static_grid_enabled: bool = True
    mask_trainable: bool = True
    init_scale: float = 0.1

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        for name in ("hidden_size", "num_blocks", "block_skip", "cell_units",
                     "embed_pos", "embed_vis", "feature_dim", "zones", "grid_size",
                     "cell_channels", "static_input_dim", "static_hidden",
                     "neighborhood_size", "obs_len", "pred_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.hidden_size % self.num_blocks != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_blocks {self.num_blocks}"
            )
        if self.lambda_reg <= 0:
            raise ConfigError(f"lambda_reg must be positive, got {self.lambda_reg}")
        if self.tau != -1.0 and not (0.0 <= self.tau <= 1.0):
            raise ConfigError(f"tau must be -1 (auto) or in [0, 1], got {self.tau}")
        if self.init_scale <= 0:
            raise ConfigError(f"init_scale must be positive, got {self.init_scale}")

    @property
    def num_cells(self) -> int:
        return self.grid_size * self.grid_size

    def social_input_width(self) -> int:
        w = self.embed_pos
        if self.variant != "g_lstm":
            w += self.embed_vis
        return w

    def check_divisibility(self) -> None:
        """Every grid cell input width must split across blocks and skips."""
        for label, width in (("social", self.social_input_width()),
                             ("static", self.static_input_dim)):
            if width % (self.num_blocks * self.block_skip) != 0:
                raise ConfigError(
                    f"{label} input width {width} not divisible by "
                    f"num_blocks*block_skip = {self.num_blocks * self.block_skip}"
                )

    def resolve_tau(self, n_peds: int) -> float:
        return (1.0 / n_peds) if self.tau == -1.0 else self.tau


@dataclass
class TrainConfig:
    """Optimization settings. optimizer is "adam" or "sgd"."""

    epochs: int = 10
    batch_size: int = 16
    lr: float = 0.001
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 7
    log_every: int = 1
    clip_norm: float = 0.0  # 0 disables clipping

    def validate(self) -> None:
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError(f"lr must be nonnegative, got {self.lr}")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm must be >= 0, got {self.clip_norm}")


def config_items(cfg) -> list[tuple[str, str]]:
    """Stable (name, repr) pairs for hashing and serialization."""
    out = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, float):
            s = repr(v)
        else:
            s = str(v)
        out.append((f.name, s))
    return out


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig | None = None) -> str:
    """sha256 over the sorted key=value lines of the config(s)."""
    lines = [f"model.{k}={v}" for k, v in config_items(model_cfg)]
    if train_cfg is not None:
        lines += [f"train.{k}={v}" for k, v in config_items(train_cfg)]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def desk_config(variant: str = "mcr_mp") -> ModelConfig:
    """Tiny instance for gradient checking: finishes in seconds, exercises
    multiple blocks, stacked cell units and a 2x2 static grid."""
    return ModelConfig(
        variant=variant,
        hidden_size=8,
        num_blocks=2,
        block_skip=2,
        cell_units=2,
        embed_pos=4,
        embed_vis=4,
        feature_dim=4,
        zones=4,
        grid_size=2,
        cell_channels=4,
        static_input_dim=8,
        static_hidden=8,
        neighborhood_size=8,
        obs_len=3,
        pred_len=2,
    )


def with_overrides(cfg, **kw):
    """replace() that rejects unknown keys with a ConfigError."""
    names = {f.name for f in fields(cfg)}
    bad = set(kw) - names
    if bad:
        raise ConfigError(f"unknown config fields: {sorted(bad)}")
    return replace(cfg, **kw)
