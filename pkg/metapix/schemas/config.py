"""
Run configuration schemas.

Every tunable of a run lives in one ``RunConfig`` tree: dataset generation,
network shapes, optimizer settings and the training schedule. Config files are
read with PyYAML (JSON is a subset of YAML), and command-line overrides use flat
dotted keys such as ``schedule.N2=600``.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from metapix.core.errors import ConfigError

IGNORE_ID = 255


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetSpec(StrictModel):
    image_size: int = Field(64, ge=32)
    num_classes: int = Field(5, ge=2, le=254)
    n_source: int = Field(400, ge=0)
    n_target_train: int = Field(40, ge=1)
    n_target_val: int = Field(100, ge=1)
    min_shapes: int = Field(2, ge=1)
    max_shapes: int = Field(5, ge=1)
    target_noise: float = Field(0.03, ge=0.0)
    texture_sigma: float = Field(0.1, ge=0.0)
    color_jitter: float = Field(0.3, ge=0.0)
    corruption_rho: float = 0.5
    corruption_min_area: float = Field(0.1, gt=0.0)
    corruption_max_area: float = Field(0.4, le=1.0)
    seed: int = 0

    @field_validator("image_size")
    @classmethod
    def image_size_poolable(cls, value: int) -> int:
        if value % 32:
            raise ValueError("image_size must be a multiple of 32 (five 2x2 poolings)")
        return value

    @field_validator("corruption_rho")
    @classmethod
    def rho_in_unit_interval(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError("corruption fraction must lie in [0, 1]")
        return value

    @model_validator(mode="after")
    def check_consistency(self) -> "DatasetSpec":
        if self.n_source < 5 * self.n_target_train:
            raise ValueError("n_source must be at least 5 * n_target_train")
        if self.min_shapes > self.max_shapes:
            raise ValueError("min_shapes exceeds max_shapes")
        if self.corruption_min_area > self.corruption_max_area:
            raise ValueError("corruption_min_area exceeds corruption_max_area")
        return self


class NetworkConfig(StrictModel):
    num_classes: int = Field(5, ge=2)
    split_at: int = Field(1, ge=0, le=5)
    seg_widths: List[int] = Field(default_factory=lambda: [8, 16, 32, 32, 32])
    weight_widths: List[int] = Field(default_factory=lambda: [8, 16, 32, 32])
    weight_mode: Literal["single", "per_class"] = "single"

    @field_validator("seg_widths")
    @classmethod
    def five_blocks(cls, value: List[int]) -> List[int]:
        if len(value) != 5 or min(value) < 1:
            raise ValueError("seg_widths needs five positive widths")
        return value

    @field_validator("weight_widths")
    @classmethod
    def four_levels(cls, value: List[int]) -> List[int]:
        if len(value) != 4 or min(value) < 1:
            raise ValueError("weight_widths needs four positive widths")
        return value


class OptimizerConfig(StrictModel):
    lr: float = Field(1e-3, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    decay: Literal["none", "poly"] = "poly"
    power: float = Field(0.9, gt=0.0)


class Schedule(StrictModel):
    N1: int = Field(3000, ge=0)
    N2: int = Field(600, ge=0)
    N3: int = Field(900, ge=0)
    G: int = Field(3, ge=0)
    alpha: float = Field(1e-4, ge=0.0)
    beta: float = Field(1e-4, ge=0.0)
    reset_meta_optimizer: bool = False
    checkpoint_every: int = Field(500, ge=1)
    weight_eval_images: int = Field(50, ge=0)

    @model_validator(mode="after")
    def generations_needed(self) -> "Schedule":
        if self.N2 + self.N3 > 0 and self.G < 1:
            raise ValueError("G must be at least 1 when N2 + N3 > 0")
        return self

    @property
    def seg_steps(self) -> int:
        """Total segmentation-optimizer steps, the polynomial decay horizon."""
        return self.N1 + self.G * self.N3


class GradcheckConfig(StrictModel):
    image_size: int = 32
    num_classes: int = 2
    seg_widths: List[int] = Field(default_factory=lambda: [2, 2, 2, 2, 2])
    weight_widths: List[int] = Field(default_factory=lambda: [2, 2, 2, 2])
    split_at: int = Field(1, ge=0, le=5)
    weight_mode: Literal["single", "per_class"] = "single"
    alpha: float = Field(0.5, ge=0.0)
    step: float = Field(1e-5, gt=0.0)
    oracle_precision: Literal["float64", "extended"] = "extended"
    tolerance: float = Field(1e-5, gt=0.0)
    primitive_tolerance: float = Field(1e-6, gt=0.0)
    floor: float = Field(1e-10, ge=0.0)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])


class RunConfig(StrictModel):
    seed: int = 0
    precision: Literal["float32", "float64"] = "float32"
    batch_size: int = Field(1, ge=1)
    ignore_id: int = IGNORE_ID
    data_dir: Optional[Path] = None
    run_root: Optional[Path] = None
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    schedule: Schedule = Field(default_factory=Schedule)
    seg_optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    meta_optimizer: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(lr=1e-4, decay="none"))
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)

    @model_validator(mode="after")
    def classes_agree(self) -> "RunConfig":
        if self.network.num_classes != self.dataset.num_classes:
            raise ValueError(
                f"network.num_classes ({self.network.num_classes}) differs from "
                f"dataset.num_classes ({self.dataset.num_classes})"
            )
        if 0 <= self.ignore_id < self.dataset.num_classes:
            raise ValueError("ignore_id collides with a class id")
        return self

    def echo(self) -> str:
        """Fully resolved configuration, as written to a run directory."""
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _diagnostics(error: ValidationError) -> Dict[str, str]:
    return {".".join(str(part) for part in item["loc"]) or "config": item["msg"] for item in error.errors()}


def parse_override(text: str) -> tuple:
    if "=" not in text:
        raise ConfigError(f"Override '{text}' is not of the form key=value", details={"override": text})
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"Override '{text}' has an empty key", details={"override": text})
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    return key, value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``a.b.c=value`` overrides to a nested mapping, validating key names."""
    for text in overrides:
        key, value = parse_override(text)
        parts = key.split(".")
        model: Any = RunConfig
        cursor = data
        for depth, part in enumerate(parts):
            fields = getattr(model, "model_fields", None)
            if fields is None or part not in fields:
                raise ConfigError(
                    f"Unknown configuration key '{key}'",
                    details={"key": key, "at": ".".join(parts[: depth + 1])},
                )
            if depth == len(parts) - 1:
                cursor[part] = value
            else:
                model = fields[part].annotation
                cursor = cursor.setdefault(part, {})
                if not isinstance(cursor, dict):
                    raise ConfigError(f"Key '{key}' descends into a non-mapping value", details={"key": key})
    return data


def build_run_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as error:
        diagnostics = _diagnostics(error)
        raise ConfigError(
            "Invalid configuration: " + "; ".join(f"{k}: {v}" for k, v in diagnostics.items()),
            details={"fields": diagnostics},
        ) from error


def load_run_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """
    Load a run configuration from a JSON/YAML file and apply dotted overrides.

    Raises:
        ConfigError: unreadable file, unknown keys, or invalid values; the
            details carry one diagnostic per offending field.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as error:
            raise ConfigError(f"Cannot read configuration file {path}: {error}", details={"path": str(path)}) from error
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"Configuration file {path} must hold a mapping", details={"path": str(path)})
        data = loaded or {}
    data = apply_overrides(data, overrides)
    return build_run_config(data)
