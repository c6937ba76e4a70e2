"""
Central finite-difference verification of tape gradients
"""

from typing import Callable, Dict, Mapping, Optional

import numpy as np

from app.errors import UsageError
from app.tensor.tape import Tape, Value, backward

ScalarFn = Callable[[Tape, Value], Value]
MultiScalarFn = Callable[[Tape, Dict[str, Value]], Value]

DEFAULT_EPSILON = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def _scalar(value: Value) -> float:
    if not isinstance(value, Value) or value.data.size != 1:
        shape = getattr(value, "shape", type(value).__name__)
        raise UsageError(f"grad_check needs a scalar-valued function, got {shape}")
    return value.item()


def _evaluate(f: MultiScalarFn, arrays: Mapping[str, np.ndarray]) -> float:
    tape = Tape()
    leaves = {name: tape.constant(array, name=name) for name, array in arrays.items()}
    return _scalar(f(tape, leaves))


def grad_check_many(
    f: MultiScalarFn,
    arrays: Mapping[str, np.ndarray],
    epsilon: float = DEFAULT_EPSILON,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """
    Compare tape gradients against central differences for several inputs.

    Args:
        f: Builds a scalar Value on the given tape from the named leaves
        arrays: Named input arrays; each gets its own leaf
        epsilon: Finite-difference step
        max_coords: When set, check only this many randomly sampled coordinates per input
        seed: Seed for the coordinate sampling

    Returns:
        Max relative error per input name
    """
    if epsilon <= 0:
        raise UsageError(f"epsilon must be positive, got {epsilon}")

    arrays = {name: np.array(array, dtype=np.float64) for name, array in arrays.items()}
    tape = Tape()
    leaves = {name: tape.leaf(array, name=name) for name, array in arrays.items()}
    loss = f(tape, leaves)
    _scalar(loss)
    grads = backward(tape, loss)

    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}
    for name, array in arrays.items():
        analytic = grads[leaves[name]].reshape(-1)
        if max_coords is not None and max_coords < array.size:
            coords = np.sort(rng.choice(array.size, size=max_coords, replace=False))
        else:
            coords = np.arange(array.size)

        worst = 0.0
        for index in coords:
            shifted_arrays = dict(arrays)
            shifted = array.copy()
            shifted.flat[index] += epsilon
            shifted_arrays[name] = shifted
            upper = _evaluate(f, shifted_arrays)
            shifted.flat[index] -= 2.0 * epsilon
            lower = _evaluate(f, shifted_arrays)

            numeric = (upper - lower) / (2.0 * epsilon)
            err = float(relative_error(np.array(analytic[index]), np.array(numeric)))
            worst = max(worst, err)
        report[name] = worst
    return report


def grad_check(
    f: ScalarFn,
    x: np.ndarray,
    epsilon: float = DEFAULT_EPSILON,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    Args:
        f: Builds a scalar Value on the given tape from the leaf for ``x``
        x: Point at which to check
        epsilon: Finite-difference step

    Returns:
        max over coordinates of |a - n| / max(|a|, |n|, 1e-8)
    """
    report = grad_check_many(lambda tape, leaves: f(tape, leaves["x"]), {"x": x}, epsilon, max_coords, seed)
    return report["x"]
