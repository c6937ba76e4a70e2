"""
Finite-difference verification suite for every tape op and the composed model
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.config.env_config import GRADCHECK_COMPOSED_TOLERANCE, GRADCHECK_OP_TOLERANCE
from app.config.settings import AttentionConfig, BackboneConfig, LocalizerConfig, NetworkConfig
from app.errors import UsageError, VerificationError
from app.models import attention, backbone, network
from app.tensor.gradcheck import DEFAULT_EPSILON, grad_check_many
from app.tensor.tape import Tape, Value
from app.training.losses import multi_task_loss

logger = logging.getLogger(__name__)

OP = "op"
COMPOSED = "composed"

CheckFn = Callable[[Tape, Dict[str, Value]], Value]


@dataclass
class CheckCase:
    fn: CheckFn
    arrays: Dict[str, np.ndarray]
    max_coords: Optional[int] = None


@dataclass
class CheckResult:
    name: str
    kind: str
    errors: Dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error < self.tolerance


@dataclass
class VerificationReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [result for result in self.results if not result.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "check": result.name,
                    "kind": result.kind,
                    "max_rel_error": result.max_error,
                    "tolerance": result.tolerance,
                    "passed": result.passed,
                }
                for result in self.results
            ]
        )


def _signed(rng: np.random.Generator, shape: Tuple[int, ...], low: float = 1e-3) -> np.ndarray:
    """Uniform in [-1, 1] with |x| > low, away from the ReLU kink."""
    magnitude = rng.uniform(low, 1.0, size=shape)
    return magnitude * rng.choice([-1.0, 1.0], size=shape)


def _projected(tape: Tape, out: Value, weights: np.ndarray) -> Value:
    return tape.dot_const(out, weights)


def _case_conv2d(rng: np.random.Generator) -> CheckCase:
    weights = rng.normal(size=(1, 3, 4, 4))
    return CheckCase(
        fn=lambda tape, v: _projected(
            tape, tape.conv2d(v["x"], v["kernel"], v["bias"], stride=2, dilation=2, padding=2), weights
        ),
        arrays={
            "x": _signed(rng, (1, 2, 7, 7)),
            "kernel": _signed(rng, (3, 2, 3, 3)),
            "bias": _signed(rng, (3,)),
        },
    )


def _case_relu(rng: np.random.Generator) -> CheckCase:
    weights = rng.normal(size=(1, 2, 4, 4))
    return CheckCase(
        fn=lambda tape, v: _projected(tape, tape.relu(v["x"]), weights),
        arrays={"x": _signed(rng, (1, 2, 4, 4))},
    )


def _case_tanh(rng: np.random.Generator) -> CheckCase:
    weights = rng.normal(size=(1, 2, 4, 4))
    return CheckCase(
        fn=lambda tape, v: _projected(tape, tape.tanh_act(v["x"]), weights),
        arrays={"x": _signed(rng, (1, 2, 4, 4))},
    )


def _case_spatial_softmax(rng: np.random.Generator) -> CheckCase:
    weights = rng.normal(size=(1, 1, 4, 5))
    return CheckCase(
        fn=lambda tape, v: _projected(tape, tape.spatial_softmax(v["m"]), weights),
        arrays={"m": _signed(rng, (1, 1, 4, 5))},
    )


def _case_channel_sum(rng: np.random.Generator) -> CheckCase:
    weights = rng.normal(size=(1, 1, 4, 4))
    return CheckCase(
        fn=lambda tape, v: _projected(tape, tape.channel_sum(v["x"]), weights),
        arrays={"x": _signed(rng, (1, 3, 4, 4))},
    )


def _case_global_avg_pool(rng: np.random.Generator) -> CheckCase:
    weights = rng.normal(size=(1, 3))
    return CheckCase(
        fn=lambda tape, v: _projected(tape, tape.global_avg_pool(v["x"]), weights),
        arrays={"x": _signed(rng, (1, 3, 4, 4))},
    )


def _case_linear(rng: np.random.Generator) -> CheckCase:
    weights = rng.normal(size=(2, 3))
    return CheckCase(
        fn=lambda tape, v: _projected(tape, tape.linear(v["x"], v["weight"], v["bias"]), weights),
        arrays={
            "x": _signed(rng, (2, 5)),
            "weight": _signed(rng, (3, 5)),
            "bias": _signed(rng, (3,)),
        },
    )


def _case_concat(rng: np.random.Generator) -> CheckCase:
    weights = rng.normal(size=(1, 5))
    return CheckCase(
        fn=lambda tape, v: _projected(tape, tape.concat([v["a"], v["b"]]), weights),
        arrays={"a": _signed(rng, (1, 2)), "b": _signed(rng, (1, 3))},
    )


def _case_crop_resize(rng: np.random.Generator) -> CheckCase:
    weights = rng.normal(size=(1, 2, 5, 5))
    return CheckCase(
        fn=lambda tape, v: _projected(tape, tape.crop_resize(v["image"], (1, 2, 8, 10), 5), weights),
        arrays={"image": _signed(rng, (1, 2, 9, 11))},
    )


def _case_cross_entropy(rng: np.random.Generator) -> CheckCase:
    return CheckCase(
        fn=lambda tape, v: tape.cross_entropy(v["logits"], 2),
        arrays={"logits": _signed(rng, (1, 4))},
    )


def _positive_features(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    # post-ReLU features are non-negative; positive values keep every gate off its kink
    return rng.uniform(0.1, 1.0, size=shape)


def _case_channel_gates(rng: np.random.Generator) -> CheckCase:
    weights = rng.normal(size=(1, 4))

    def fn(tape: Tape, v: Dict[str, Value]) -> Value:
        s = tape.spatial_softmax(v["m"])
        return _projected(tape, attention.channel_gates(tape, v["x"], s), weights)

    return CheckCase(
        fn=fn,
        arrays={"x": _positive_features(rng, (1, 4, 5, 5)), "m": _signed(rng, (1, 1, 5, 5))},
    )


def _case_attention_map(rng: np.random.Generator) -> CheckCase:
    weights = rng.normal(size=(1, 1, 5, 5))

    def fn(tape: Tape, v: Dict[str, Value]) -> Value:
        s = tape.spatial_softmax(v["m"])
        gates = attention.channel_gates(tape, v["x"], s)
        return _projected(tape, attention.attention_map(tape, v["x"], s, gates), weights)

    return CheckCase(
        fn=fn,
        arrays={"x": _positive_features(rng, (1, 4, 5, 5)), "m": _signed(rng, (1, 1, 5, 5))},
    )


def _case_gated_attention(rng: np.random.Generator) -> CheckCase:
    channels = 4
    config = AttentionConfig()
    params = attention.init_attention_params(rng, channels)
    params = {name: array + 0.05 * _signed(rng, array.shape) for name, array in params.items()}

    def fn(tape: Tape, v: Dict[str, Value]) -> Value:
        return tape.sum_all(attention.gated_attention(tape, v["x"], v, config).attention_map)

    return CheckCase(fn=fn, arrays={"x": _positive_features(rng, (1, channels, 6, 6)), **params})


def _case_backbone(rng: np.random.Generator) -> CheckCase:
    config = BackboneConfig(stage_channels=[4, 6], input_size=12)
    params = backbone.init_backbone_params(rng, "global", config)
    params = {name: array + 0.05 * _signed(rng, array.shape) for name, array in params.items()}
    weights = rng.normal(size=(1, 6, 3, 3))

    def fn(tape: Tape, v: Dict[str, Value]) -> Value:
        return _projected(tape, backbone.backbone_forward(tape, v["image"], v, "global", config), weights)

    return CheckCase(fn=fn, arrays={"image": rng.uniform(0.0, 1.0, size=(1, 3, 12, 12)), **params})


def toy_network_config(num_classes: int = 2) -> NetworkConfig:
    """32x32 input, two stages of at most 8 channels, k = 2."""
    return NetworkConfig(
        global_backbone=BackboneConfig(stage_channels=[4, 8], input_size=32),
        instance_backbone=BackboneConfig(stage_channels=[4, 8], input_size=16),
        localizer=LocalizerConfig(top_k=2, patch_size=16, min_component_area=1),
        num_classes=num_classes,
    )


def _case_model(rng: np.random.Generator, lam: float = 0.5, max_coords: int = 6) -> CheckCase:
    config = toy_network_config()
    params = network.init_params(config, seed=int(rng.integers(2**31)))
    params = {name: array + 0.05 * _signed(rng, array.shape) for name, array in params.items()}
    image = rng.uniform(0.0, 1.0, size=(1, 3, 32, 32))

    # localization is piecewise constant; pin the boxes found at the unperturbed point
    boxes = network.forward(image, params, config).pixel_boxes
    standardized_image = network.standardize_image(image)
    label = 1

    def fn(tape: Tape, v: Dict[str, Value]) -> Value:
        output = network.forward_bound(
            tape, tape.constant(standardized_image, name="image"), v, config, boxes=boxes
        )
        return multi_task_loss(tape, output.logits_global, output.logits_fusion, label, lam)

    return CheckCase(fn=fn, arrays=params, max_coords=max_coords)


CHECKS: Dict[str, Tuple[str, Callable[[np.random.Generator], CheckCase]]] = {
    "conv2d": (OP, _case_conv2d),
    "relu": (OP, _case_relu),
    "tanh_act": (OP, _case_tanh),
    "spatial_softmax": (OP, _case_spatial_softmax),
    "channel_sum": (OP, _case_channel_sum),
    "global_avg_pool": (OP, _case_global_avg_pool),
    "linear": (OP, _case_linear),
    "concat": (OP, _case_concat),
    "crop_resize": (OP, _case_crop_resize),
    "cross_entropy": (OP, _case_cross_entropy),
    "channel_gates": (OP, _case_channel_gates),
    "attention_map": (OP, _case_attention_map),
    "gated_attention": (OP, _case_gated_attention),
    "backbone": (OP, _case_backbone),
    "model": (COMPOSED, _case_model),
}


def run_checks(
    names: Optional[Sequence[str]] = None,
    seed: int = 0,
    epsilon: float = DEFAULT_EPSILON,
    op_tolerance: float = GRADCHECK_OP_TOLERANCE,
    composed_tolerance: float = GRADCHECK_COMPOSED_TOLERANCE,
    strict: bool = False,
) -> VerificationReport:
    """
    Run the selected checks, all of them by default.

    Args:
        names: Check names from ``CHECKS``
        seed: Seed for inputs and coordinate sampling
        epsilon: Finite-difference step
        op_tolerance: Threshold for single-op checks
        composed_tolerance: Threshold for the composed model
        strict: Raise VerificationError instead of returning a failing report

    Returns:
        One result per check, in ``CHECKS`` order
    """
    selected = list(CHECKS) if not names else list(names)
    unknown = sorted(set(selected) - set(CHECKS))
    if unknown:
        raise UsageError(f"unknown check(s): {', '.join(unknown)}; choose from {', '.join(CHECKS)}")

    report = VerificationReport()
    for index, name in enumerate(CHECKS):
        if name not in selected:
            continue
        kind, build = CHECKS[name]
        case = build(np.random.default_rng([seed, index]))
        errors = grad_check_many(case.fn, case.arrays, epsilon, case.max_coords, seed)
        tolerance = op_tolerance if kind == OP else composed_tolerance
        result = CheckResult(name=name, kind=kind, errors=errors, tolerance=tolerance)
        report.results.append(result)
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"{name}: max relative error {result.max_error:.3e} (tolerance {tolerance:g})")

    if strict and not report.passed:
        failed = ", ".join(result.name for result in report.failures)
        raise VerificationError(f"gradient check failed for: {failed}")
    return report


def summarize(errors: Mapping[str, float]) -> str:
    return ", ".join(f"{name}={value:.2e}" for name, value in sorted(errors.items()))
