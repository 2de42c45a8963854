"""
Configuration models and layering.

Precedence: defaults < JSON config file < `--set section.key=value` overrides.
Seed precedence: explicit flag > REFPOINT_SEED env var > DEFAULT_SEED.
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import FormatError, IoError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_SEED = 0
SEED_ENV_VAR = "REFPOINT_SEED"

MODALITIES = ("finger", "eye", "head")


class NetworkConfig(BaseModel):
    """Shape of the model-level fusion CNN."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    t: int = Field(36, ge=1)
    f_per_branch: int = Field(2, ge=1)
    d: int = Field(3, ge=1)
    feature_maps: int = Field(128, ge=1)
    branch_layers: int = Field(2, ge=1)
    joint_layers: int = Field(2, ge=1)
    joint_kernel: Tuple[int, int] = (2, 2)
    output_dim: int = Field(3, ge=1)
    modalities: Tuple[str, ...] = MODALITIES

    @field_validator("modalities")
    @classmethod
    def _known_modalities(cls, value):
        if not value:
            raise ValueError("at least one modality is required")
        unknown = [m for m in value if m not in MODALITIES]
        if unknown:
            raise ValueError(f"unknown modalities: {unknown}")
        # canonical order keeps parameter layout stable
        return tuple(m for m in MODALITIES if m in value)

    @field_validator("joint_kernel")
    @classmethod
    def _positive_kernel(cls, value):
        if min(value) < 1:
            raise ValueError("kernel dims must be >= 1")
        return value

    @property
    def f(self) -> int:
        return self.f_per_branch * len(MODALITIES)

    def joint_output_hw(self) -> Tuple[int, int]:
        kh, kw = self.joint_kernel
        h = self.t - self.joint_layers * (kh - 1)
        w = self.f - self.joint_layers * (kw - 1)
        return h, w


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.001, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    lr_patience: int = Field(5, ge=1)
    lr_factor: float = Field(0.5, gt=0, lt=1)
    min_lr: float = Field(1e-6, ge=0)
    seed: int = DEFAULT_SEED
    validation_fraction: float = Field(0.2, gt=0, lt=1)
    dtype: str = "float32"
    standardize_positions: bool = True

    @field_validator("dtype")
    @classmethod
    def _known_dtype(cls, value):
        if value not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return value


class EvalConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    k_folds: int = Field(5, ge=2)
    pooled: bool = False
    match_method: str = "direction_box"
    jobs: int = Field(1, ge=1)

    @field_validator("match_method")
    @classmethod
    def _known_method(cls, value):
        if value not in ("direction_box", "ray_box"):
            raise ValueError("match_method must be 'direction_box' or 'ray_box'")
        return value


class RunConfig(BaseModel):
    """Everything a CLI run needs, resolved before execution."""
    model_config = ConfigDict(extra="forbid")

    seed: int = DEFAULT_SEED
    jobs: int = Field(1, ge=1)
    network: NetworkConfig = NetworkConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    profile: Dict[str, Any] = {}
    occlusion: Dict[str, Any] = {}
    paths: Dict[str, str] = {}

    def resolve_paths(self) -> "RunConfig":
        resolved = {k: str(Path(v).expanduser().resolve()) for k, v in self.paths.items()}
        return self.model_copy(update={"paths": resolved})

    def require_parent_dirs(self, keys: List[str]) -> None:
        """Fail before any work when an output path points into a missing directory."""
        for key in keys:
            path = self.paths.get(key)
            if path and not os.path.isdir(os.path.dirname(path)):
                raise IoError(f"output directory does not exist for --{key}: {os.path.dirname(path)}")


def resolve_seed(explicit: Optional[int] = None) -> int:
    """Flag beats REFPOINT_SEED beats the documented default."""
    if explicit is not None:
        return int(explicit)
    env_value = os.getenv(SEED_ENV_VAR)
    if env_value:
        try:
            return int(env_value)
        except ValueError:
            raise UsageError(f"{SEED_ENV_VAR} must be an integer, got {env_value!r}")
    return DEFAULT_SEED


def parse_override(pair: str) -> Tuple[List[str], Any]:
    """Split 'train.epochs=3' into (['train', 'epochs'], 3)."""
    if "=" not in pair:
        raise UsageError(f"override must look like key=value, got {pair!r}")
    key, raw = pair.split("=", 1)
    key = key.strip()
    if not key:
        raise UsageError(f"empty key in override {pair!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(base: Dict[str, Any], pairs: List[str]) -> Dict[str, Any]:
    merged = json.loads(json.dumps(base))
    for pair in pairs or []:
        keys, value = parse_override(pair)
        node = merged
        for k in keys[:-1]:
            child = node.setdefault(k, {})
            if not isinstance(child, dict):
                raise UsageError(f"cannot set {'.'.join(keys)}: {k} is not a section")
            node = child
        node[keys[-1]] = value
    return merged


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    if not os.path.exists(path):
        raise IoError(f"config file not found: {path}")
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise FormatError(f"config file {path} must hold a JSON object")
    return data


def build_run_config(config_path: Optional[str] = None,
                     overrides: Optional[List[str]] = None,
                     seed: Optional[int] = None,
                     jobs: Optional[int] = None,
                     paths: Optional[Dict[str, str]] = None) -> RunConfig:
    """Layer defaults, file and CLI overrides into one validated RunConfig."""
    layered = apply_overrides(load_config_file(config_path), overrides or [])
    layered["seed"] = resolve_seed(seed if seed is not None else layered.get("seed"))
    if jobs is not None:
        layered["jobs"] = jobs
    if paths:
        layered.setdefault("paths", {}).update({k: v for k, v in paths.items() if v})
    # the training seed follows the run seed unless pinned explicitly
    layered.setdefault("train", {}).setdefault("seed", layered["seed"])
    layered.setdefault("eval", {}).setdefault("jobs", layered.get("jobs", 1))
    try:
        cfg = RunConfig(**layered)
    except ValidationError as e:
        raise UsageError(f"invalid configuration: {e}")
    logger.debug(f"Resolved run config: seed={cfg.seed} jobs={cfg.jobs}")
    return cfg.resolve_paths()
