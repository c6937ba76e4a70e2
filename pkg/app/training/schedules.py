"""
Epoch schedules for the loss weight lambda and the learning rate
"""

from decimal import Decimal

from app.config.settings import TrainConfig
from app.errors import UsageError


def _exact(value: float) -> Decimal:
    # shortest repr, so 0.05 stays 0.05 and not its binary expansion
    return Decimal(repr(float(value)))


def _check_epoch(epoch: int) -> None:
    if epoch < 0:
        raise UsageError(f"epoch must be non-negative, got {epoch}")


def lambda_schedule(epoch: int, config: TrainConfig) -> float:
    """max(lambda_floor, lambda0 - lambda_step * floor(epoch / lambda_every))"""
    _check_epoch(epoch)
    steps = epoch // config.lambda_every
    value = _exact(config.lambda0) - _exact(config.lambda_step) * steps
    return float(max(_exact(config.lambda_floor), value))


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """lr0 * lr_decay_factor ** floor(epoch / lr_decay_every)"""
    _check_epoch(epoch)
    steps = epoch // config.lr_decay_every
    return float(_exact(config.lr0) * _exact(config.lr_decay_factor) ** steps)
