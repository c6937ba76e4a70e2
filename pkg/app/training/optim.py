"""
Stochastic gradient descent with momentum
"""

from typing import Dict, Mapping, MutableMapping

import numpy as np

from app.errors import ShapeError


def init_velocity(params: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(array) for name, array in params.items()}


def sgd_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float,
    velocity: MutableMapping[str, np.ndarray],
) -> MutableMapping[str, np.ndarray]:
    """
    v <- momentum * v + g, then w <- w - lr * v, for every named array in place.

    Names missing from ``grads`` are treated as zero gradient.
    """
    for name, weight in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(weight)
        if grad.shape != weight.shape:
            raise ShapeError(f"{name}: gradient shape {grad.shape} does not match {weight.shape}")
        if name not in velocity:
            velocity[name] = np.zeros_like(weight)
        velocity[name] = momentum * velocity[name] + grad
        params[name] = weight - lr * velocity[name]
    return params
