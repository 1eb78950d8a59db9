"""
Run configuration for the TAGS toolkit
Dataclass sections, named presets and strict JSON loading
"""

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from core.errors import ConfigError
from modules.encoder import PoolingConfig
from modules.losses import LossWeights

THUMOS_TIOUS = (0.3, 0.4, 0.5, 0.6, 0.7)
ACTIVITYNET_TIOUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
TIOU_PRESETS = {"thumos14": THUMOS_TIOUS, "activitynet": ACTIVITYNET_TIOUS}
MASK_DESIGNS = ("global", "actionness")


def _coerce(value: Any, hint: Any, key: str) -> Any:
    """Check a JSON value against a dataclass field annotation"""
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError("expected a list", key)
        item = args[0] if args else Any
        if len(args) > 1 and args[1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"expected {len(args)} values", key)
            return tuple(_coerce(v, a, key) for v, a in zip(value, args))
        return tuple(_coerce(v, item, key) for v in value)
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError("expected an object", key)
        return {str(k): _coerce(v, args[1], f"{key}.{k}") for k, v in value.items()}
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError("expected true or false", key)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("expected an integer", key)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("expected a number", key)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError("expected a string", key)
        return value
    return value


@dataclass
class EncoderConfig:
    """Scale set, heads, embedding width, pooling per scale and mask design"""
    scales: Tuple[int, ...] = (1, 2)
    num_heads: int = 4
    width: Optional[int] = None          # None: feature dimension
    consistency_dim: Optional[int] = None  # None: width
    pooling: Dict[str, Tuple[int, int, int]] = field(default_factory=dict)
    positional: bool = False
    mask_design: str = "global"

    def validate(self):
        scales = tuple(int(s) for s in self.scales)
        if not scales or any(s not in (1, 2, 4) for s in scales) or len(set(scales)) != len(scales):
            raise ConfigError("must be a non-empty subset of {1, 2, 4}", "encoder.scales")
        self.scales = scales
        if self.num_heads < 1:
            raise ConfigError("must be >= 1", "encoder.num_heads")
        if self.width is not None and (self.width < 1 or self.width % self.num_heads):
            raise ConfigError(f"must be a positive multiple of num_heads={self.num_heads}", "encoder.width")
        for key, value in self.pooling.items():
            if not str(key).isdigit() or int(key) not in scales or len(value) != 3:
                raise ConfigError("expected {scale: [kernel, stride, padding]}", f"encoder.pooling.{key}")
            try:
                PoolingConfig(*value).check_scale(int(key))
            except ValueError as e:
                raise ConfigError(str(e), f"encoder.pooling.{key}") from e
        if self.mask_design not in MASK_DESIGNS:
            raise ConfigError(f"choose from {MASK_DESIGNS}", "encoder.mask_design")

    def resolved_width(self, feature_dim: int) -> int:
        width = self.width or feature_dim
        if width % self.num_heads:
            raise ConfigError(f"width {width} is not divisible by num_heads={self.num_heads}", "encoder.width")
        return width


@dataclass
class TrainConfig:
    """Optimisation schedule"""
    epochs: int = 15
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    seed: int = 7
    T: int = 64
    workers: int = 1

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("must be >= 1", "train.epochs")
        if self.lr < 0:
            raise ConfigError("must be >= 0", "train.lr")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)", "train.beta1")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "train.batch_size")
        if self.T < 1:
            raise ConfigError("must be >= 1", "train.T")
        if self.workers < 1:
            raise ConfigError("must be >= 1", "train.workers")


@dataclass
class InferenceConfig:
    """Candidate decoding and SoftNMS"""
    thresholds: Optional[Tuple[float, ...]] = None  # None: loss.thresholds
    theta_c: float = 0.3
    sigma: float = 0.5
    score_floor: float = 1e-4
    max_keep: int = 100
    per_class: bool = False

    def validate(self):
        if self.thresholds is not None:
            th = [float(t) for t in self.thresholds]
            if not th or any(not 0 < t < 1 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
                raise ConfigError("must be non-empty, strictly increasing and inside (0, 1)",
                                  "inference.thresholds")
            self.thresholds = tuple(th)
        if not 0 <= self.theta_c <= 1:
            raise ConfigError("must lie in [0, 1]", "inference.theta_c")
        if self.sigma <= 0:
            raise ConfigError("must be > 0", "inference.sigma")
        if self.max_keep < 1:
            raise ConfigError("must be >= 1", "inference.max_keep")


@dataclass
class EvalConfig:
    """tIoU grid and false-positive profile settings"""
    tious: Tuple[float, ...] = ACTIVITYNET_TIOUS
    fp_tiou: float = 0.5
    fp_budgets: int = 10

    def validate(self):
        if not self.tious or any(not 0 < t <= 1 for t in self.tious):
            raise ConfigError("must be a non-empty list inside (0, 1]", "eval.tious")
        self.tious = tuple(float(t) for t in self.tious)
        if not 0 < self.fp_tiou <= 1:
            raise ConfigError("must lie in (0, 1]", "eval.fp_tiou")
        if self.fp_budgets < 1:
            raise ConfigError("must be >= 1", "eval.fp_budgets")


@dataclass
class PathsConfig:
    """Inputs and outputs"""
    data: Optional[str] = None
    annotations: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None

    def validate(self):
        pass


SECTIONS = {
    "encoder": EncoderConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "inference": InferenceConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    """Everything a run needs, one dataclass per section"""
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    PRESETS = {
        "synthetic": {
            "encoder": {"width": 64, "positional": True},
            "train": {"T": 64, "epochs": 300},
            "eval": {"tious": ACTIVITYNET_TIOUS},
        },
        "thumos14": {
            "train": {"T": 1024, "batch_size": 25, "lr": 1e-5, "epochs": 15},
            "eval": {"tious": THUMOS_TIOUS},
        },
        "activitynet": {
            "train": {"T": 800, "batch_size": 50, "lr": 1e-4, "epochs": 15},
            "eval": {"tious": ACTIVITYNET_TIOUS},
        },
    }

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    @property
    def decode_thresholds(self) -> Tuple[float, ...]:
        return self.inference.thresholds or self.loss.thresholds

    def to_dict(self) -> Dict[str, Any]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "RunConfig":
        """Build a config from nested dicts; unknown keys are rejected"""
        config = cls()
        config.update(payload)
        return config.validate()

    @staticmethod
    def read_json(path) -> Dict[str, Any]:
        """Parse a config file without applying it"""
        with open(Path(path), "r", encoding="utf-8") as fh:
            try:
                return json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"invalid JSON ({e})", str(path)) from e

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(cls.read_json(path))

    @classmethod
    def from_preset(cls, name: str) -> "RunConfig":
        if name not in cls.PRESETS:
            raise ConfigError(f"unknown preset, choose from {sorted(cls.PRESETS)}", "preset")
        return cls.from_dict(copy.deepcopy(cls.PRESETS[name]))

    def update(self, payload: Dict[str, Any]) -> "RunConfig":
        """Merge nested values into this config"""
        if not isinstance(payload, dict):
            raise ConfigError("expected a JSON object", "root")
        for section, values in payload.items():
            if section not in SECTIONS:
                raise ConfigError("unknown key", section)
            if not isinstance(values, dict):
                raise ConfigError("expected an object", section)
            target = getattr(self, section)
            known = {f.name for f in fields(target)}
            hints = get_type_hints(type(target))
            for key, value in values.items():
                if key not in known:
                    raise ConfigError("unknown key", f"{section}.{key}")
                setattr(target, key, _coerce(value, hints[key], f"{section}.{key}"))
        return self

    def override(self, dotted: Dict[str, Any]) -> "RunConfig":
        """Apply 'section.key' overrides (CLI flags); None values are skipped"""
        nested: Dict[str, Dict[str, Any]] = {}
        for key, value in dotted.items():
            if value is None:
                continue
            section, _, name = key.partition(".")
            nested.setdefault(section, {})[name] = value
        self.update(nested)
        return self.validate()
