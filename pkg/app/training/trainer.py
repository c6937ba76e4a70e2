"""
Mini-batch training loop and evaluation
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from app.config.settings import NetworkConfig, TrainConfig
from app.errors import UsageError
from app.models.checkpoint import save_checkpoint
from app.models.network import ForwardOutput, ModelParams, check_params, forward, init_params
from app.tensor import kernels
from app.tensor.tape import Tape, backward
from app.tools.localizer import covered_fraction, union_iou
from app.tools.synthdata import SynthSample
from app.training.losses import cross_entropy, multi_task_loss
from app.training.metrics import EpochRecord, Metrics, accuracy_metrics, write_metrics_log
from app.training.optim import init_velocity, sgd_step
from app.training.schedules import lambda_schedule, lr_schedule

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    params: ModelParams
    history: List[EpochRecord] = field(default_factory=list)


def _check_dataset(samples: Sequence[SynthSample], num_classes: int) -> None:
    if not samples:
        raise UsageError("dataset is empty")
    bad = sorted({s.label for s in samples if not 0 <= s.label < num_classes})
    if bad:
        raise UsageError(f"labels {bad} out of range for {num_classes} classes")


def _image_dims(sample: SynthSample) -> tuple:
    return tuple(np.shape(sample.image)[-2:])


def _predicted_label(output: ForwardOutput) -> int:
    return int(np.argmax(kernels.softmax(output.prediction_logits.data)[0]))


def _loc_iou(output: ForwardOutput, sample: SynthSample) -> Optional[float]:
    if not sample.gt_boxes:
        return None
    return union_iou(output.pixel_boxes, sample.gt_boxes, _image_dims(sample))


def _mean_or_none(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def train(
    samples: Sequence[SynthSample],
    network: NetworkConfig,
    config: TrainConfig,
    checkpoint_path: Optional[Path] = None,
    metrics_path: Optional[Path] = None,
    test_samples: Optional[Sequence[SynthSample]] = None,
    params: Optional[ModelParams] = None,
    progress: bool = False,
) -> TrainResult:
    """
    Optimise the multi-task loss with scheduled lambda and learning rate.

    Args:
        samples: Training set
        network: Network layout
        config: Optimisation schedule and seed
        checkpoint_path: Where the final parameters are written, if given
        metrics_path: JSON-lines epoch log, rewritten after every epoch, if given
        test_samples: Held-out set whose accuracy is logged per epoch as ``test_acc``
        params: Starting parameters; freshly initialised from the seed when None
        progress: Show a tqdm bar over epochs

    Returns:
        Final parameters and the per-epoch records
    """
    _check_dataset(samples, network.num_classes)
    if params is None:
        params = init_params(network, config.seed)
    else:
        check_params(params, network)
        params = {name: np.array(array, dtype=kernels.DTYPE) for name, array in params.items()}
    velocity = init_velocity(params)
    history: List[EpochRecord] = []

    if metrics_path is not None:
        write_metrics_log(metrics_path, history)

    epochs = tqdm(range(config.epochs), desc="train", unit="epoch", disable=not progress)
    for epoch in epochs:
        lam = lambda_schedule(epoch, config) if network.fusion else 1.0
        lr = lr_schedule(epoch, config)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))

        losses: List[float] = []
        hits: List[bool] = []
        ious: List[float] = []
        for start in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[start : start + config.batch_size]]
            summed: Dict[str, np.ndarray] = {}
            for sample in batch:
                tape = Tape()
                output = forward(sample.image, params, network, tape)
                loss = multi_task_loss(
                    tape, output.logits_global, output.logits_fusion, sample.label, lam
                )
                grads = backward(tape, loss)
                for name, leaf in output.leaves.items():
                    grad = grads[leaf]
                    summed[name] = summed[name] + grad if name in summed else grad.copy()

                losses.append(loss.item())
                hits.append(_predicted_label(output) == sample.label)
                iou = _loc_iou(output, sample)
                if iou is not None:
                    ious.append(iou)

            mean_grads = {name: grad / len(batch) for name, grad in summed.items()}
            sgd_step(params, mean_grads, lr, config.momentum, velocity)

        record = EpochRecord(
            epoch=epoch,
            lambda_=lam,
            lr=lr,
            loss=float(np.mean(losses)),
            acc=float(np.mean(hits)),
            loc_iou=_mean_or_none(ious),
        )
        if test_samples:
            record.test_acc = evaluate(test_samples, params, network).accuracy
        history.append(record)

        logger.info(
            f"epoch {epoch} lambda {lam:.3g} lr {lr:.3g} loss {record.loss:.4f} "
            f"acc {record.acc:.3f} loc_iou {record.loc_iou}"
            + (f" test_acc {record.test_acc:.3f}" if record.test_acc is not None else "")
        )
        if metrics_path is not None:
            write_metrics_log(metrics_path, history)

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params)
    return TrainResult(params=params, history=history)


def evaluate(
    samples: Sequence[SynthSample], params: ModelParams, network: NetworkConfig
) -> Metrics:
    """
    Accuracy, per-class accuracy, localization scores and mean loss on a dataset.

    Localization scores are None when no sample carries ground-truth boxes.
    """
    _check_dataset(samples, network.num_classes)
    predictions: List[int] = []
    losses: List[float] = []
    ious: List[float] = []
    covered = total = 0
    for sample in samples:
        output = forward(sample.image, params, network)
        predictions.append(_predicted_label(output))
        losses.append(cross_entropy(output.prediction_logits.data[0], sample.label))
        iou = _loc_iou(output, sample)
        if iou is not None:
            ious.append(iou)
            hit, count = covered_fraction(output.pixel_boxes, sample.gt_boxes)
            covered += hit
            total += count

    accuracy, per_class = accuracy_metrics(
        predictions, [s.label for s in samples], network.num_classes
    )
    return Metrics(
        accuracy=accuracy,
        per_class_accuracy=per_class,
        mean_loc_iou=_mean_or_none(ious),
        box_coverage=covered / total if total else None,
        mean_loss=float(np.mean(losses)),
        count=len(samples),
    )
