"""
Typed configuration sections and the flat key = value loader
"""

import json
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Mapping, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator, model_validator

from app.config.env_config import DEFAULT_OUTPUT_DIR
from app.errors import UsageError


def _split_csv(value: Any) -> Any:
    """Accept "2,4" style strings for list and tuple fields."""
    if isinstance(value, str):
        return [int(part) for part in value.replace(" ", "").split(",") if part]
    return value


IntList = Annotated[List[int], BeforeValidator(_split_csv)]
IntPair = Annotated[Tuple[int, int], BeforeValidator(_split_csv)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AttentionConfig(_Section):
    """Hyperparameters of the gated attention module."""

    dilation_rates: IntPair = Field(
        default=(2, 4), description="Dilation of the two 3x3 dilated blocks"
    )
    hidden_channels: Optional[int] = Field(
        default=None,
        description="Channels kept through the dilated blocks; must equal the feature channels",
    )
    gate_epsilon: float = Field(default=0.0, description="Reserved, unused")
    attention_mode: Literal["gated", "average"] = Field(
        default="gated",
        description="'gated' uses ReLU(tanh) channel gates, 'average' a plain channel mean",
    )

    @field_validator("dilation_rates")
    @classmethod
    def _positive_rates(cls, rates: Tuple[int, int]) -> Tuple[int, int]:
        if min(rates) < 1:
            raise ValueError(f"dilation rates must be positive, got {rates}")
        return rates


class LocalizerConfig(_Section):
    """Attention map to instance patch settings."""

    rel_threshold: float = Field(
        default=0.5, gt=0.0, lt=1.0, description="Mask keeps values >= rel_threshold * max"
    )
    top_k: int = Field(default=4, ge=1, description="Number of instance patches fed to fusion")
    patch_size: int = Field(default=96, ge=1, description="Side of the resized square patch")
    min_component_area: int = Field(
        default=2, ge=1, description="Components with fewer mask pixels are dropped"
    )


class BackboneConfig(_Section):
    """A stack of [conv 3x3 stride 2, ReLU] stages."""

    stage_channels: IntList = Field(default=[8, 16, 32, 64], min_length=1)
    input_size: int = Field(default=96, ge=1)
    in_channels: int = Field(default=3, ge=1)

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.stage_channels)

    @property
    def output_size(self) -> int:
        return self.input_size // self.total_stride

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    @model_validator(mode="after")
    def _check_geometry(self) -> "BackboneConfig":
        if self.input_size % self.total_stride:
            raise ValueError(
                f"input_size {self.input_size} is not divisible by the total stride {self.total_stride}"
            )
        if self.output_size < 3:
            raise ValueError(
                f"final feature map is {self.output_size}x{self.output_size}; at least 3x3 is required"
            )
        return self


class LayoutConfig(_Section):
    """Network layout as it appears in config files."""

    global_stages: IntList = Field(default=[8, 16, 32, 64], description="Global backbone channels")
    instance_stages: IntList = Field(
        default=[8, 16, 32, 64], description="Shared instance backbone channels"
    )
    input_size: int = Field(default=96, ge=1, description="Side of the downsampled global input")
    fusion: bool = Field(default=True, description="False trains the global branch alone")


class NetworkConfig(_Section):
    """Everything the forward pass needs."""

    global_backbone: BackboneConfig
    instance_backbone: BackboneConfig
    attention: AttentionConfig = AttentionConfig()
    localizer: LocalizerConfig = LocalizerConfig()
    num_classes: int = Field(default=4, ge=1)
    fusion: bool = True

    @property
    def global_dim(self) -> int:
        return self.global_backbone.out_channels

    @property
    def instance_dim(self) -> int:
        return self.instance_backbone.out_channels

    @property
    def fusion_dim(self) -> int:
        return self.global_dim + self.localizer.top_k * self.instance_dim

    @model_validator(mode="after")
    def _check_consistency(self) -> "NetworkConfig":
        if self.instance_backbone.input_size != self.localizer.patch_size:
            raise ValueError(
                f"instance backbone input {self.instance_backbone.input_size} "
                f"must equal patch_size {self.localizer.patch_size}"
            )
        hidden = self.attention.hidden_channels
        if hidden is not None and hidden != self.global_dim:
            raise ValueError(
                f"hidden_channels {hidden} must equal the global feature channels {self.global_dim}"
            )
        return self


class TrainConfig(_Section):
    """Optimisation schedule for the multi-task loss."""

    epochs: int = Field(default=60, ge=0)
    batch_size: int = Field(default=16, ge=1)
    lr0: float = Field(default=0.05, ge=0.0, description="Initial learning rate")
    lr_decay_every: int = Field(default=50, ge=1)
    lr_decay_factor: float = Field(default=0.1, gt=0.0)
    lambda0: float = Field(default=1.0, ge=0.0, le=1.0, description="Initial global-loss weight")
    lambda_step: float = Field(default=0.1, ge=0.0)
    lambda_every: int = Field(default=20, ge=1)
    lambda_floor: float = Field(default=0.1, ge=0.0, le=1.0)
    momentum: float = Field(default=0.5, ge=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0)


class SynthConfig(_Section):
    """Synthetic multi-instance dataset."""

    num_classes: int = Field(default=4, ge=1, le=9, description="Classes; rim ratio 0.1 * (k + 1)")
    image_size: int = Field(default=128, ge=32)
    min_instances: int = Field(default=1, ge=1)
    max_instances: int = Field(default=4, ge=1)
    glyph_radius_min: int = Field(default=7, ge=4)
    glyph_radius_max: int = Field(default=11, ge=4)
    clutter_density: float = Field(
        default=1.0, ge=0.0, description="Expected distractor shapes per 64x64 area"
    )
    noise_amplitude: float = Field(default=0.03, ge=0.0, le=0.5)
    train_per_class: int = Field(default=50, ge=1)
    test_per_class: int = Field(default=20, ge=1)

    @property
    def rim_ratios(self) -> List[float]:
        return [round(0.1 * (k + 1), 10) for k in range(self.num_classes)]

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthConfig":
        if self.min_instances > self.max_instances:
            raise ValueError("min_instances must not exceed max_instances")
        if self.glyph_radius_min > self.glyph_radius_max:
            raise ValueError("glyph_radius_min must not exceed glyph_radius_max")
        if 4 * (self.glyph_radius_max + 2) > self.image_size:
            raise ValueError("glyphs are too large for the image")
        return self


class PathsConfig(_Section):
    out_dir: Path = Field(default=Path(DEFAULT_OUTPUT_DIR))
    checkpoint: Optional[Path] = None
    data_dir: Optional[Path] = None


_SECTIONS: Dict[str, type] = {
    "train": TrainConfig,
    "synth": SynthConfig,
    "localizer": LocalizerConfig,
    "attention": AttentionConfig,
    "layout": LayoutConfig,
    "paths": PathsConfig,
}

# flat key -> section; every field name is unique across sections
FLAT_KEYS: Dict[str, str] = {
    key: section for section, model in _SECTIONS.items() for key in model.model_fields
}


class RunConfig(_Section):
    """Union of every section plus paths; what a cli invocation runs with."""

    train: TrainConfig = TrainConfig()
    synth: SynthConfig = SynthConfig()
    localizer: LocalizerConfig = LocalizerConfig()
    attention: AttentionConfig = AttentionConfig()
    layout: LayoutConfig = LayoutConfig()
    paths: PathsConfig = PathsConfig()

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            global_backbone=BackboneConfig(
                stage_channels=self.layout.global_stages, input_size=self.layout.input_size
            ),
            instance_backbone=BackboneConfig(
                stage_channels=self.layout.instance_stages, input_size=self.localizer.patch_size
            ),
            attention=self.attention,
            localizer=self.localizer,
            num_classes=self.synth.num_classes,
            fusion=self.layout.fusion,
        )

    @classmethod
    def from_flat(cls, values: Mapping[str, Any]) -> "RunConfig":
        """Build from flat keys; unknown keys raise UsageError naming them."""
        unknown = sorted(key for key in values if key not in FLAT_KEYS)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")

        sections: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}
        for key, value in values.items():
            if value is None:
                continue
            sections[FLAT_KEYS[key]][key] = value
        return cls.model_validate(sections)

    def to_flat(self, include_paths: bool = False) -> Dict[str, Any]:
        flat: Dict[str, Any] = {}
        for section in _SECTIONS:
            if section == "paths" and not include_paths:
                continue
            flat.update(getattr(self, section).model_dump(mode="json"))
        return flat


def read_config_file(path: Path) -> Dict[str, Optional[str]]:
    """
    Parse a flat ``key = value`` file with ``#`` comments.

    Args:
        path: Config file location

    Returns:
        Raw string values keyed by flat config key
    """
    if not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return dict(dotenv_values(path, interpolate=False))


def sidecar_path(checkpoint: Path) -> Path:
    return Path(f"{checkpoint}.json")


def write_sidecar(checkpoint: Path, config: RunConfig) -> Path:
    path = sidecar_path(checkpoint)
    path.write_text(json.dumps(config.to_flat(), indent=2, sort_keys=True))
    return path


def read_sidecar(checkpoint: Optional[Path]) -> Dict[str, Any]:
    if checkpoint is None:
        return {}
    path = sidecar_path(checkpoint)
    if not path.is_file():
        return {}
    return json.loads(path.read_text())


def resolve_run_config(
    flags: Mapping[str, Any],
    file_values: Optional[Mapping[str, Any]] = None,
    sidecar_values: Optional[Mapping[str, Any]] = None,
) -> Tuple[RunConfig, List[str]]:
    """
    Merge configuration layers: flag > config file > checkpoint sidecar > default.

    Returns:
        The validated RunConfig and the keys where a flag overrode the config file
    """
    merged: Dict[str, Any] = dict(sidecar_values or {})
    merged.update({k: v for k, v in (file_values or {}).items() if v is not None})
    overridden = sorted(key for key in flags if file_values and key in file_values)
    merged.update(flags)
    return RunConfig.from_flat(merged), overridden
