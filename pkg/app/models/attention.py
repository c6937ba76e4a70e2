"""
Gated attention module: semantic map, channel gates and the gated attention map
"""

from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

import numpy as np

from app.config.settings import AttentionConfig
from app.errors import ShapeError
from app.tensor import kernels
from app.tensor.tape import Tape, Value

KERNEL_SIZE = 3
PREFIX = "attention"


@dataclass
class AttentionOutput:
    """Per-image products of the attention module, all living on one tape."""

    semantic_map: Value  # S, (n, 1, h, w), sums to 1 per item
    gates: Value  # (n, C), each in [0, 1)
    attention_map: Value  # Omega, (n, 1, h, w)
    aggregated_map: Value  # M, channel sum of the dilated-block output


def init_attention_params(rng: np.random.Generator, channels: int) -> Dict[str, np.ndarray]:
    """
    Two channel-preserving 3x3 dilated blocks.

    Weights are uniform in +-sqrt(1 / fan_in), biases start at zero.
    """
    fan_in = channels * KERNEL_SIZE * KERNEL_SIZE
    bound = np.sqrt(1.0 / fan_in)
    params: Dict[str, np.ndarray] = {}
    for block in (1, 2):
        params[f"{PREFIX}.block{block}.weight"] = rng.uniform(
            -bound, bound, size=(channels, channels, KERNEL_SIZE, KERNEL_SIZE)
        )
        params[f"{PREFIX}.block{block}.bias"] = np.zeros(channels)
    return params


def _dilated_block(tape: Tape, x: Value, weight: Value, bias: Value, dilation: int) -> Value:
    # padding = dilation keeps h, w for a 3x3 kernel
    padding = dilation * (KERNEL_SIZE - 1) // 2
    return tape.relu(tape.conv2d(x, weight, bias, stride=1, dilation=dilation, padding=padding))


def semantic_map(
    tape: Tape, x: Value, params: Mapping[str, Value], config: AttentionConfig
) -> Tuple[Value, Value]:
    """
    Multi-scale semantic map of the feature maps.

    Args:
        tape: Tape to record on
        x: Feature maps X of shape (n, C, h, w)
        params: Bound attention parameters
        config: Dilation rates of the two blocks

    Returns:
        (S, M): the spatial softmax of M and M itself, the channel sum of the block output
    """
    first, second = config.dilation_rates
    hidden = _dilated_block(
        tape, x, params[f"{PREFIX}.block1.weight"], params[f"{PREFIX}.block1.bias"], first
    )
    hidden = _dilated_block(
        tape, hidden, params[f"{PREFIX}.block2.weight"], params[f"{PREFIX}.block2.bias"], second
    )
    aggregated = tape.channel_sum(hidden)
    return tape.spatial_softmax(aggregated), aggregated


def channel_gates(tape: Tape, x: Value, s: Value) -> Value:
    """gate_k = ReLU(tanh(<X_k, S>)) for every channel k."""
    correspondence = tape.channel_correspondence(x, s)
    return tape.relu(tape.tanh_act(correspondence))


def attention_map(tape: Tape, x: Value, s: Value, gates: Value) -> Value:
    """Omega = (1/C) * sum_k gate_k * X_k."""
    kernels.check_map_shape(x.data, s.data)
    return tape.gated_channel_mean(x, gates)


def gated_attention(
    tape: Tape, x: Value, params: Mapping[str, Value], config: AttentionConfig
) -> AttentionOutput:
    """
    Full attention module on a batch of feature maps.

    In ``average`` mode the gates are fixed to one, so Omega is the plain channel mean.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"features must be (n, C, h, w), got {x.shape}")

    s, m = semantic_map(tape, x, params, config)
    if config.attention_mode == "average":
        gates = tape.constant(np.ones(x.shape[:2]), name="gates")
    else:
        gates = channel_gates(tape, x, s)
    omega = attention_map(tape, x, s, gates)
    return AttentionOutput(semantic_map=s, gates=gates, attention_map=omega, aggregated_map=m)
