"""
Configuration management for the SAMIRO lab.

A run is configured by a flat ``key = value`` document with the sections
``[data] [model] [loss] [train] [eval]``. Each section maps onto a validated
dataclass; unknown sections and keys are rejected with the offending name.
Process-level settings (log level, log directory) come from the environment.
"""

import configparser
import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from helpers.constants import (
    DEFAULT_ATTENTION_KERNEL,
    DEFAULT_IOU_THRESHOLD,
    DEFAULT_LAMBDA,
    DEFAULT_LANE_WIDTH,
    DEFAULT_SYNTH_LANE_WIDTH,
    LOSS_VARIANTS,
    NORM_EPS,
    NORM_MODES,
    TUSIMPLE_DIST_THRESHOLD,
    TUSIMPLE_POINT_RATIO,
)


# Configuration validation error
class ConfigurationError(Exception):
    """Raised when configuration is invalid."""

    pass


def _check_range(name: str, low: float, high: float) -> None:
    if low > high:
        raise ConfigurationError(f"{name}: empty range [{low}, {high}]")


def _check_probability(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ConfigurationError(f"{name} must be a probability in [0, 1], got {value}")


@dataclass
class DataConfig:
    """Synthetic scene generation parameters."""

    height: int = 64
    width: int = 128
    channels: int = 1
    train_count: int = 256
    test_count: int = 64
    seed: int = 0
    test_seed: int = 1000
    lanes_min: int = 2
    lanes_max: int = 4
    curvature_min: float = -0.25
    curvature_max: float = 0.25
    horizon: float = 0.3  # fraction of height where lanes start
    lane_width_px: int = 2  # rendered lane thickness and training-mask width
    clutter_density: float = 0.01
    p_illumination: float = 0.3
    gain_min: float = 0.4
    gain_max: float = 1.5
    bias_min: float = -0.15
    bias_max: float = 0.15
    p_occlusion: float = 0.3
    occluders_max: int = 2

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ConfigurationError(f"image size {self.height}x{self.width} is too small")
        if self.channels not in (1, 3):
            raise ConfigurationError(f"channels must be 1 or 3, got {self.channels}")
        if self.train_count < 0 or self.test_count < 0:
            raise ConfigurationError("dataset counts must be non-negative")
        if self.lanes_min < 1:
            raise ConfigurationError(f"lanes_min must be >= 1, got {self.lanes_min}")
        _check_range("lanes", self.lanes_min, self.lanes_max)
        _check_range("curvature", self.curvature_min, self.curvature_max)
        _check_range("gain", self.gain_min, self.gain_max)
        _check_range("bias", self.bias_min, self.bias_max)
        if self.gain_min <= 0:
            raise ConfigurationError(f"gain_min must be > 0, got {self.gain_min}")
        if not 0.0 < self.horizon < 0.8:
            raise ConfigurationError(f"horizon must be in (0, 0.8), got {self.horizon}")
        if self.lane_width_px < 1:
            raise ConfigurationError(f"lane_width_px must be >= 1, got {self.lane_width_px}")
        _check_probability("clutter_density", self.clutter_density)
        _check_probability("p_illumination", self.p_illumination)
        _check_probability("p_occlusion", self.p_occlusion)
        if self.occluders_max < 0:
            raise ConfigurationError(f"occluders_max must be >= 0, got {self.occluders_max}")


@dataclass
class ModelConfig:
    """Encoder, attention and head architecture."""

    target_widths: tuple[int, ...] = (8, 16, 32)
    oracle_widths: tuple[int, ...] = (8, 16, 32)
    kernel_size: int = 3
    attention_kernel: int = DEFAULT_ATTENTION_KERNEL
    head_hidden: int = 8

    def __post_init__(self):
        if not self.target_widths or not self.oracle_widths:
            raise ConfigurationError("encoder widths must list at least one stage")
        if any(w < 1 for w in self.target_widths + self.oracle_widths):
            raise ConfigurationError("encoder widths must be positive")
        for name in ("kernel_size", "attention_kernel"):
            value = getattr(self, name)
            if value < 1 or value % 2 == 0:
                raise ConfigurationError(f"{name} must be a positive odd integer, got {value}")
        if self.head_hidden < 1:
            raise ConfigurationError(f"head_hidden must be >= 1, got {self.head_hidden}")


@dataclass
class LossConfig:
    """Regulariser selection and weighting. ``lam`` is the key ``lambda`` in config files."""

    lam: float = DEFAULT_LAMBDA
    variant: str = "samiro"
    norm_mode: str = "per_channel_spatial"
    stage_set: tuple[int, ...] = (1, 2, 3)
    eps_norm: float = NORM_EPS
    use_norm: bool = True
    use_attention: bool = True

    def __post_init__(self):
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ConfigurationError(f"lambda must be a finite value >= 0, got {self.lam}")
        if self.variant not in LOSS_VARIANTS:
            raise ConfigurationError(f"variant must be one of {', '.join(LOSS_VARIANTS)}, got '{self.variant}'")
        if self.norm_mode not in NORM_MODES:
            raise ConfigurationError(f"norm_mode must be one of {', '.join(NORM_MODES)}, got '{self.norm_mode}'")
        if self.eps_norm <= 0:
            raise ConfigurationError(f"eps_norm must be > 0, got {self.eps_norm}")
        if len(set(self.stage_set)) != len(self.stage_set) or any(s < 1 for s in self.stage_set):
            raise ConfigurationError(f"stage_set must hold distinct indices >= 1, got {list(self.stage_set)}")

    @property
    def active(self) -> bool:
        return self.variant != "none" and self.lam > 0


@dataclass
class TrainConfig:
    """Optimisation schedule for pretraining and fine-tuning."""

    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    steps: int = 300
    pretrain_steps: int = 200
    batch_size: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    cosine: bool = False
    pretrain_lr: float = 0.05
    mask_ratio: float = 0.6
    patch_size: int = 8
    mim_images: int = 32
    mask_width: int = 5  # lane band width of the training target
    oracle_mode: str = "mim"
    checkpoint_every: int = 0
    precision: str = "float32"
    log_every: int = 25

    def __post_init__(self):
        if self.steps < 0 or self.pretrain_steps < 0:
            raise ConfigurationError("step counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ConfigurationError("learning rates must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.patch_size < 1:
            raise ConfigurationError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.oracle_mode not in ("mim", "random"):
            raise ConfigurationError(f"oracle_mode must be 'mim' or 'random', got '{self.oracle_mode}'")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"precision must be float32 or float64, got '{self.precision}'")
        if not self.seeds:
            raise ConfigurationError("seeds must list at least one seed")
        if self.mask_width < 1:
            raise ConfigurationError(f"mask_width must be >= 1, got {self.mask_width}")
        if self.checkpoint_every < 0 or self.mim_images < 0 or self.log_every < 1:
            raise ConfigurationError("checkpoint_every and mim_images must be >= 0, log_every >= 1")


@dataclass
class EvalConfig:
    """Lane decoding and metric parameters."""

    iou: float = DEFAULT_IOU_THRESHOLD
    lane_width: int = DEFAULT_LANE_WIDTH
    synth_lane_width: int = DEFAULT_SYNTH_LANE_WIDTH
    threshold: float = 0.5
    row_stride: int = 1
    max_dx: float = 5.0
    max_row_gap: int = 3
    matcher: str = "hungarian"
    tusimple_dist: float = TUSIMPLE_DIST_THRESHOLD
    tusimple_ratio: float = TUSIMPLE_POINT_RATIO

    def __post_init__(self):
        if not 0.0 < self.iou <= 1.0:
            raise ConfigurationError(f"iou must be in (0, 1], got {self.iou}")
        if self.lane_width < 1 or self.synth_lane_width < 1:
            raise ConfigurationError("lane widths must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.row_stride < 1 or self.max_row_gap < 1 or self.max_dx <= 0:
            raise ConfigurationError("row_stride and max_row_gap must be >= 1, max_dx > 0")
        if self.matcher not in ("hungarian", "greedy"):
            raise ConfigurationError(f"matcher must be 'hungarian' or 'greedy', got '{self.matcher}'")
        if self.tusimple_dist <= 0:
            raise ConfigurationError(f"tusimple_dist must be > 0, got {self.tusimple_dist}")
        _check_probability("tusimple_ratio", self.tusimple_ratio)


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}

# Config-file spellings that differ from the attribute name
KEY_ALIASES = {("loss", "lambda"): "lam"}
ATTRIBUTE_KEYS = {("loss", "lam"): "lambda"}


def _parse_value(section: str, key: str, raw: str, annotation: Any) -> Any:
    text = raw.strip()
    try:
        if annotation is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation == tuple[int, ...]:
            return tuple(int(part) for part in text.split(",") if part.strip())
        return text
    except ValueError:
        type_name = getattr(annotation, "__name__", annotation)
        raise ConfigurationError(f"[{section}] {key}: cannot parse '{raw}' as {type_name}")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class LabConfig:
    """
    Fully resolved configuration of one run.

    This class loads the sectioned config file, validates every section, and
    renders the resolved document (defaults included) that each run logs.
    """

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "LabConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
        parser.optionxform = str  # keys are case sensitive
        try:
            parser.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigurationError(f"{source}: {e}")

        sections: dict[str, Any] = {}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigurationError(f"{source}: unknown section [{section}]")
            section_cls = SECTIONS[section]
            types = {f.name: f.type for f in fields(section_cls)}
            values = {}
            for key, raw in parser.items(section):
                attribute = KEY_ALIASES.get((section, key), key)
                if attribute not in types or (section, attribute) in ATTRIBUTE_KEYS and key == attribute:
                    raise ConfigurationError(f"{source}: unknown key '{key}' in [{section}]")
                values[attribute] = _parse_value(section, key, raw, _resolve_type(types[attribute]))
            try:
                sections[section] = section_cls(**values)
            except ConfigurationError as e:
                raise ConfigurationError(f"{source}: [{section}] {e}")
        config = cls(**sections)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str | os.PathLike | None) -> "LabConfig":
        """Load a config file; ``None`` yields the defaults."""
        if path is None:
            return cls()
        config_path = Path(path)
        try:
            text = config_path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigurationError(f"cannot read config file {config_path}: {e.strerror}")
        return cls.from_text(text, source=str(config_path))

    def validate(self) -> None:
        """Cross-section checks."""
        stages = min(len(self.model.target_widths), len(self.model.oracle_widths))
        if self.loss.stage_set and max(self.loss.stage_set) > stages:
            raise ConfigurationError(
                f"[loss] stage_set {list(self.loss.stage_set)} exceeds the {stages} encoder stages"
            )
        if self.loss.variant != "none" and not self.loss.stage_set:
            raise ConfigurationError("[loss] stage_set is empty while a regulariser variant is selected")
        factor = 2 ** len(self.model.target_widths)
        if self.data.height % factor or self.data.width % factor:
            raise ConfigurationError(
                f"[data] image size {self.data.height}x{self.data.width} is not divisible by {factor} "
                f"({len(self.model.target_widths)} encoder stages)"
            )
        if self.data.height % self.train.patch_size or self.data.width % self.train.patch_size:
            raise ConfigurationError(
                f"[train] patch_size {self.train.patch_size} does not divide {self.data.height}x{self.data.width}"
            )

    def replace(self, section: str, **changes: Any) -> "LabConfig":
        """Copy with some fields of one section changed (re-validated)."""
        updated = dataclasses.replace(getattr(self, section), **changes)
        config = dataclasses.replace(self, **{section: updated})
        config.validate()
        return config

    def resolved_text(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for f in fields(getattr(self, section)):
                key = ATTRIBUTE_KEYS.get((section, f.name), f.name)
                lines.append(f"{key} = {_format_value(getattr(getattr(self, section), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode("utf-8")).hexdigest()

    def summary(self) -> dict[str, Any]:
        """Return a dictionary summarizing the configuration."""
        return {
            "image": f"{self.data.height}x{self.data.width}x{self.data.channels}",
            "variant": self.loss.variant,
            "lambda": self.loss.lam,
            "norm_mode": self.loss.norm_mode,
            "stage_set": list(self.loss.stage_set),
            "steps": self.train.steps,
            "seeds": list(self.train.seeds),
            "config_hash": self.config_hash()[:12],
        }


def _resolve_type(annotation: Any) -> Any:
    if isinstance(annotation, str):
        return {"int": int, "float": float, "bool": bool, "str": str, "tuple[int, ...]": tuple[int, ...]}[annotation]
    return annotation


@dataclass
class RuntimeConfig:
    """Process-level settings from the environment, overridable by flags."""

    log_level: str = "normal"
    log_dir: str = "logs"
    timestamps: bool = True

    def __post_init__(self):
        if self.log_level not in ("quiet", "normal", "verbose", "debug"):
            raise ConfigurationError(
                f"Invalid log level '{self.log_level}'. Must be one of: quiet, normal, verbose, debug."
            )

    @classmethod
    def from_env(cls, override_args=None):
        """
        Create a runtime configuration from environment variables.

        Args:
            override_args: Optional argparse Namespace to override env vars

        Returns:
            RuntimeConfig: A validated configuration instance
        """
        config = cls(
            log_level=os.getenv("SAMIRO_LOG_LEVEL", "normal").lower(),
            log_dir=os.getenv("SAMIRO_LOG_DIR", "logs"),
            timestamps=os.getenv("SAMIRO_NO_TIMESTAMP", "").lower() not in ["true", "1", "t", "yes"],
        )

        if override_args:
            if getattr(override_args, "log_level", None):
                config.log_level = override_args.log_level
            if getattr(override_args, "no_timestamp", False):
                config.timestamps = False
            config.__post_init__()

        return config
