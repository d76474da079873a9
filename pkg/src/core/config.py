"""
Configuration utilities for the BirdSwin detector and its service
"""
import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


PROJECT_ROOT = Path(__file__).parent.parent.parent
PRESETS_DIR = PROJECT_ROOT / "configs"


class ConfigError(Exception):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NeckConfig(_Strict):
    window: int = Field(default=2, ge=1, description="Neck attention window size in tokens")
    blocks_per_stage: int = Field(default=2, ge=0)
    use_rel_bias: bool = True
    head_dim: int = Field(default=16, ge=1, description="Channels per attention head in the neck")
    mlp_ratio: float = Field(default=4.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.blocks_per_stage % 2:
            raise ValueError("neck blocks_per_stage must be even (W-MSA / SW-MSA pairs)")
        if self.blocks_per_stage and self.window < 2:
            raise ValueError("neck window must be >= 2 when shifted blocks are enabled")
        return self


class ModelConfig(_Strict):
    embed_dim: int = Field(default=32, ge=1)
    depths: List[int] = Field(default_factory=lambda: [2, 2, 2, 2])
    num_heads: List[int] = Field(default_factory=lambda: [2, 4, 8, 16])
    backbone_window: int = Field(default=4, ge=1)
    mlp_ratio: float = Field(default=4.0, gt=0)
    use_rel_bias: bool = True
    zero_init_residual: bool = False
    dtype: str = Field(default="float32", pattern="^(float32|float64)$")
    neck: NeckConfig = Field(default_factory=NeckConfig)

    @model_validator(mode="after")
    def _check(self):
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ValueError("backbone needs exactly four stages (C2..C5)")
        for i, (depth, heads) in enumerate(zip(self.depths, self.num_heads)):
            dim = self.embed_dim * 2 ** i
            if depth % 2:
                raise ValueError(f"stage {i} depth {depth} must be even")
            if dim % heads:
                raise ValueError(f"stage {i} dim {dim} not divisible by {heads} heads")
        return self


class SceneConfig(_Strict):
    image_size: int = Field(default=128, ge=32)
    birds_per_image: Tuple[int, int] = (1, 6)
    bird_size_px: Tuple[int, int] = (4, 24)
    clutter_density: float = Field(default=0.3, ge=0)
    seed: int = Field(default=0, ge=0)

    @field_validator("birds_per_image", "bird_size_px")
    @classmethod
    def _ordered(cls, value):
        low, high = value
        if low < 0 or high < low:
            raise ValueError(f"invalid range {value}")
        return value

    @model_validator(mode="after")
    def _small_objects(self):
        if self.bird_size_px[1] >= 32:
            raise ValueError("bird_size_px max must stay below 32 (small-object regime)")
        if self.bird_size_px[0] < 2:
            raise ValueError("bird_size_px min must be at least 2")
        if self.image_size % 32:
            raise ValueError("image_size must be divisible by 32")
        return self


class DataConfig(_Strict):
    scene: SceneConfig = Field(default_factory=SceneConfig)
    train_dir: str = "data/train"
    val_dir: str = "data/val"
    clutter_dir: str = "data/clutter"
    n_train: int = Field(default=600, ge=1)
    n_val: int = Field(default=100, ge=1)
    n_clutter: int = Field(default=50, ge=0)


class TrainConfig(_Strict):
    epochs: int = Field(default=15, ge=0)
    batch_size: int = Field(default=8, ge=1)
    lr: float = Field(default=3e-4, gt=0)
    weight_decay: float = Field(default=0.05, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0)
    grad_clip: float = Field(default=5.0, ge=0)
    seed: int = Field(default=0, ge=0)
    finetune_epochs: int = Field(default=0, ge=0)
    finetune_lr: float = Field(default=1e-4, gt=0)
    out_dir: str = "runs/desk"
    eval_every: int = Field(default=1, ge=1, description="Validate every N epochs")


class LossWeights(_Strict):
    hm_alpha: float = Field(default=2.0, ge=0)
    hm_gamma: float = Field(default=6.0, ge=0)
    wh_weight: float = Field(default=0.2, ge=0)
    off_weight: float = Field(default=1.0, ge=0)


class EvalConfig(_Strict):
    score_thresh: float = Field(default=0.05, ge=0, le=1)
    top_k: int = Field(default=100, ge=1)


class HardNegativeConfig(_Strict):
    enabled: bool = False
    rate: float = Field(default=0.3, ge=0, le=1)
    score_thresh: float = Field(default=0.3, ge=0, le=1)
    iou_thresh: float = Field(default=0.3, ge=0, le=1)
    epochs: int = Field(default=5, ge=0)
    lr: float = Field(default=1e-4, gt=0)


class RunConfig(_Strict):
    name: str = "desk"
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    hard_negative: HardNegativeConfig = Field(default_factory=HardNegativeConfig)


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _resolve_preset_path(ref: str, relative_to: Optional[Path]) -> Path:
    candidate = Path(ref)
    if candidate.suffix:
        if not candidate.is_absolute() and relative_to is not None:
            candidate = relative_to / candidate
        return candidate
    return PRESETS_DIR / f"{ref}.json"


def _load_document(path: Path, seen: Tuple[Path, ...] = ()) -> Dict[str, Any]:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"preset cycle: {' -> '.join(str(p) for p in seen + (path,))}")
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r") as f:
        # safe_load parses JSON as well as YAML
        document = yaml.safe_load(f) or {}
    if not isinstance(document, dict):
        raise ConfigError(f"config root must be an object: {path}")

    parent_ref = document.pop("preset", None)
    if parent_ref is None:
        return document
    parent = _load_document(_resolve_preset_path(parent_ref, path.parent), seen + (path,))
    return deep_merge(parent, document)


def build_run_config(document: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{where}: {first['msg']}") from e


def load_run_config(ref: Union[str, Path, None] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load a run configuration.

    `ref` is a preset name (resolved in configs/) or a file path; None gives the
    built-in defaults. `overrides` is a nested dict merged last.
    """
    if ref is None:
        document: Dict[str, Any] = {}
    else:
        ref = str(ref)
        path = Path(ref) if Path(ref).suffix else _resolve_preset_path(ref, None)
        document = _load_document(path)
    if overrides:
        document = deep_merge(document, overrides)
    return build_run_config(document)


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    return build_run_config(deep_merge(cfg.model_dump(mode="json"), overrides))


def _drop_path(document: Dict[str, Any], dotted: str) -> None:
    node = document
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.get(part, {})
    node.pop(parts[-1], None)


def config_hash(cfg: RunConfig, exclude: Iterable[str] = ()) -> str:
    document = cfg.model_dump(mode="json")
    for dotted in exclude:
        _drop_path(document, dotted)
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def get_mcp_config_path() -> str:
    """
    Get the path to the service configuration file.

    Checks environment variable MCP_CONFIG_PATH first,
    falls back to default location relative to project root.
    """
    config_path = os.environ.get("MCP_CONFIG_PATH")
    if config_path:
        return config_path
    return str(PROJECT_ROOT / "mcp_config.yaml")


def load_mcp_config() -> dict:
    config_path = get_mcp_config_path()
    with open(config_path, "r") as f:
        return yaml.safe_load(f)


DATA_ROOT_ENV = "BIRDSWIN_DATA_ROOT"
DEFAULT_MAX_IMAGE_SIDE = 1024


def get_data_root() -> Path:
    """Directory the service may write datasets under; BIRDSWIN_DATA_ROOT overrides mcp_config.yaml."""
    configured = os.environ.get(DATA_ROOT_ENV) or load_mcp_config().get("data_root", "data")
    path = Path(configured)
    return (path if path.is_absolute() else PROJECT_ROOT / path).resolve()


def get_max_image_side() -> int:
    return int(load_mcp_config().get("max_image_side", DEFAULT_MAX_IMAGE_SIDE))
