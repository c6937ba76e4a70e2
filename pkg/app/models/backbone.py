"""
Convolutional feature extractor shared by the global and instance branches
"""

from typing import Dict, Mapping

import numpy as np

from app.config.settings import BackboneConfig
from app.errors import ShapeError
from app.tensor.tape import Tape, Value

KERNEL_SIZE = 3
STRIDE = 2
# keeps the activation second moment roughly constant through conv + ReLU stages
RELU_GAIN = 6.0


def init_backbone_params(
    rng: np.random.Generator, prefix: str, config: BackboneConfig
) -> Dict[str, np.ndarray]:
    """Uniform +-sqrt(6 / fan_in) weights (ReLU gain) and zero biases for every stage."""
    params: Dict[str, np.ndarray] = {}
    channels_in = config.in_channels
    for stage, channels_out in enumerate(config.stage_channels, start=1):
        bound = np.sqrt(RELU_GAIN / (channels_in * KERNEL_SIZE * KERNEL_SIZE))
        params[f"{prefix}.stage{stage}.weight"] = rng.uniform(
            -bound, bound, size=(channels_out, channels_in, KERNEL_SIZE, KERNEL_SIZE)
        )
        params[f"{prefix}.stage{stage}.bias"] = np.zeros(channels_out)
        channels_in = channels_out
    return params


def backbone_forward(
    tape: Tape, image: Value, params: Mapping[str, Value], prefix: str, config: BackboneConfig
) -> Value:
    """
    Run the stages [conv 3x3 stride 2 padding 1, ReLU] over an image batch.

    Args:
        tape: Tape to record on
        image: (n, in_channels, H, W) with H, W divisible by the total stride
        params: Bound parameters keyed by ``{prefix}.stage{i}.{weight,bias}``
        prefix: ``global`` or ``instance``
        config: Stage layout

    Returns:
        Feature maps of shape (n, C, H / stride, W / stride)
    """
    if image.data.ndim != 4:
        raise ShapeError(f"image batch must be (n, c, H, W), got {image.shape}")
    _, channels, height, width = image.shape
    if channels != config.in_channels:
        raise ShapeError(f"expected {config.in_channels} input channels, got {channels}")
    stride = config.total_stride
    if height % stride or width % stride:
        raise ShapeError(
            f"image {height}x{width} is not divisible by the total stride {stride}"
        )

    features = image
    for stage in range(1, len(config.stage_channels) + 1):
        features = tape.relu(
            tape.conv2d(
                features,
                params[f"{prefix}.stage{stage}.weight"],
                params[f"{prefix}.stage{stage}.bias"],
                stride=STRIDE,
                padding=KERNEL_SIZE // 2,
            )
        )
    return features
