"""
Two-branch classifier: global branch with gated attention, instance branch over
the localized patches, and the fusion head
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from app.config.settings import NetworkConfig
from app.errors import ShapeError, UsageError
from app.models import attention, backbone
from app.models.attention import AttentionOutput
from app.tensor import kernels
from app.tensor.tape import Tape, Value
from app.tools.localizer import InstanceBox, Localization, crop_resize, localize

logger = logging.getLogger(__name__)

ModelParams = Dict[str, np.ndarray]

GLOBAL = "global"
INSTANCE = "instance"
GLOBAL_HEAD = "global_head"
FUSION_HEAD = "fusion_head"
# divisor applied after centring an image on its own mean
IMAGE_SCALE = 0.5


@dataclass
class ForwardOutput:
    """Everything one forward pass produced; all Values live on ``tape``."""

    tape: Tape
    image: Value
    leaves: Dict[str, Value]
    features: Value
    attention: AttentionOutput
    localization: Localization
    logits_global: Value
    logits_fusion: Value

    @property
    def pixel_boxes(self) -> List[InstanceBox]:
        return self.localization.pixel_boxes

    @property
    def prediction_logits(self) -> Value:
        return self.logits_fusion


@dataclass
class Prediction:
    label: int
    probabilities: np.ndarray
    boxes: List[InstanceBox]


def param_shapes(config: NetworkConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape of every trainable array, in a fixed order."""
    rng = np.random.default_rng(0)
    shapes = {name: arr.shape for name, arr in _init_arrays(rng, config).items()}
    return shapes


def _init_arrays(rng: np.random.Generator, config: NetworkConfig) -> ModelParams:
    params: ModelParams = {}
    params.update(backbone.init_backbone_params(rng, GLOBAL, config.global_backbone))
    params.update(attention.init_attention_params(rng, config.global_dim))
    params.update(_init_linear(rng, GLOBAL_HEAD, config.global_dim, config.num_classes))
    params.update(backbone.init_backbone_params(rng, INSTANCE, config.instance_backbone))
    params.update(_init_linear(rng, FUSION_HEAD, config.fusion_dim, config.num_classes))
    return params


def _init_linear(
    rng: np.random.Generator, prefix: str, fan_in: int, fan_out: int
) -> ModelParams:
    bound = np.sqrt(1.0 / fan_in)
    return {
        f"{prefix}.weight": rng.uniform(-bound, bound, size=(fan_out, fan_in)),
        f"{prefix}.bias": np.zeros(fan_out),
    }


def init_params(config: NetworkConfig, seed: int = 0) -> ModelParams:
    """
    Fresh parameters for a network.

    Args:
        config: Network layout
        seed: Seed of the single generator every array is drawn from, in name order

    Returns:
        Parameter arrays keyed by dotted name
    """
    return _init_arrays(np.random.default_rng(seed), config)


def check_params(params: Mapping[str, np.ndarray], config: NetworkConfig) -> None:
    """Raise ShapeError when params do not match the layout of ``config``."""
    expected = param_shapes(config)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ShapeError(f"parameter names disagree: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")


def bind_params(tape: Tape, params: Mapping[str, np.ndarray]) -> Dict[str, Value]:
    return {name: tape.leaf(array, name=name) for name, array in params.items()}


def as_image_batch(image: np.ndarray) -> np.ndarray:
    """(c, H, W) or (1, c, H, W) float image -> (1, c, H, W) float64."""
    array = np.asarray(image, dtype=kernels.DTYPE)
    if array.ndim == 3:
        array = array[np.newaxis]
    if array.ndim != 4 or array.shape[0] != 1:
        raise ShapeError(f"expected one image of shape (c, H, W), got {np.shape(image)}")
    return array


def standardize_image(batch: np.ndarray) -> np.ndarray:
    """Centre a batch on its image-wide mean and divide by IMAGE_SCALE; a uniform grey image maps to zeros."""
    return (batch - batch.mean()) / IMAGE_SCALE


def forward_bound(
    tape: Tape,
    image: Value,
    leaves: Mapping[str, Value],
    config: NetworkConfig,
    boxes: Optional[List[InstanceBox]] = None,
) -> ForwardOutput:
    """
    Forward pass over one standardized full-resolution image with parameters already on ``tape``.

    The global branch sees the image resampled to ``input_size``; patches are
    cropped from the full-resolution image. With fusion disabled the instance
    branch is skipped and the fusion logits are the global logits. Passing
    ``boxes`` pins the pixel boxes instead of localizing on this pass's map.
    """
    _, _, height, width = image.shape
    size = config.global_backbone.input_size
    downsampled = tape.crop_resize(image, (0, 0, height, width), size)

    features = backbone.backbone_forward(tape, downsampled, leaves, GLOBAL, config.global_backbone)
    attended = attention.gated_attention(tape, features, leaves, config.attention)
    pooled = tape.global_avg_pool(features)
    logits_global = tape.linear(
        pooled, leaves[f"{GLOBAL_HEAD}.weight"], leaves[f"{GLOBAL_HEAD}.bias"]
    )

    if boxes is None:
        located = localize(attended.attention_map, (height, width), config.localizer)
    else:
        located = Localization(map_boxes=[], pixel_boxes=list(boxes), mask=np.zeros((0, 0), np.uint8))

    logger.debug(f"Localized {len(located.pixel_boxes)} instance box(es)")

    if config.fusion:
        parts = [pooled]
        for box in located.pixel_boxes:
            patch = crop_resize(tape, image, box, config.localizer.patch_size)
            instance_features = backbone.backbone_forward(
                tape, patch, leaves, INSTANCE, config.instance_backbone
            )
            parts.append(tape.global_avg_pool(instance_features))
        for _ in range(config.localizer.top_k - len(located.pixel_boxes)):
            parts.append(tape.constant(np.zeros((1, config.instance_dim)), name="empty_slot"))
        logits_fusion = tape.linear(
            tape.concat(parts), leaves[f"{FUSION_HEAD}.weight"], leaves[f"{FUSION_HEAD}.bias"]
        )
    else:
        logits_fusion = logits_global

    return ForwardOutput(
        tape=tape,
        image=image,
        leaves=dict(leaves),
        features=features,
        attention=attended,
        localization=located,
        logits_global=logits_global,
        logits_fusion=logits_fusion,
    )


def forward(
    image: np.ndarray,
    params: Mapping[str, np.ndarray],
    config: NetworkConfig,
    tape: Optional[Tape] = None,
) -> ForwardOutput:
    """Bind ``params`` as leaves and the image as a constant on a fresh or given tape."""
    tape = tape if tape is not None else Tape()
    batch = as_image_batch(image)
    if batch.shape[1] != config.global_backbone.in_channels:
        raise ShapeError(
            f"image has {batch.shape[1]} channels, network expects {config.global_backbone.in_channels}"
        )
    standardized = tape.constant(standardize_image(batch), name="image")
    return forward_bound(tape, standardized, bind_params(tape, params), config)


def predict(
    image: np.ndarray, params: Mapping[str, np.ndarray], config: NetworkConfig
) -> Prediction:
    """Most probable class of one image; ties resolve to the lowest index."""
    output = forward(image, params, config)
    probabilities = kernels.softmax(output.prediction_logits.data)[0]
    if not np.all(np.isfinite(probabilities)):
        raise UsageError("non-finite class probabilities")
    return Prediction(
        label=int(np.argmax(probabilities)),
        probabilities=probabilities,
        boxes=output.pixel_boxes,
    )
