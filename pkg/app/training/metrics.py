"""
Evaluation metrics and the JSON-lines epoch log
"""

from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field


class Metrics(BaseModel):
    """Scores of one model on one dataset."""

    accuracy: float = Field(..., ge=0.0, le=1.0)
    per_class_accuracy: List[float] = Field(..., description="Accuracy per true class; 0 for absent classes")
    mean_loc_iou: Optional[float] = Field(
        default=None, description="Mean union-box IoU; None without ground-truth boxes"
    )
    box_coverage: Optional[float] = Field(
        default=None, description="Share of ground-truth boxes more than half covered by the selected boxes"
    )
    mean_loss: float = Field(..., description="Mean cross-entropy of the prediction logits")
    count: int = Field(..., ge=0)


class EpochRecord(BaseModel):
    """One line of the metrics log."""

    model_config = ConfigDict(populate_by_name=True)

    epoch: int
    lambda_: float = Field(..., alias="lambda")
    lr: float
    loss: float
    acc: float
    loc_iou: Optional[float] = None
    test_acc: Optional[float] = None


def accuracy_metrics(
    predictions: Sequence[int], labels: Sequence[int], num_classes: int
) -> Tuple[float, List[float]]:
    """
    Overall and per-class accuracy.

    Returns:
        (accuracy, per-class accuracy list of length num_classes)
    """
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.size} predictions for {labels.size} labels")
    if labels.size == 0:
        return 0.0, [0.0] * num_classes

    hits = predictions == labels
    per_class = []
    for cls in range(num_classes):
        members = labels == cls
        per_class.append(float(hits[members].mean()) if members.any() else 0.0)
    return float(hits.mean()), per_class


def write_metrics_log(path: Path, records: Sequence[EpochRecord]) -> Path:
    """Rewrite the log with one JSON object per epoch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not records:
        path.write_text("")
        return path
    frame = pd.DataFrame([record.model_dump(by_alias=True) for record in records])
    frame.to_json(path, orient="records", lines=True)
    return path


def read_metrics_log(path: Path) -> pd.DataFrame:
    path = Path(path)
    if not path.read_text().strip():
        columns = [field.alias or name for name, field in EpochRecord.model_fields.items()]
        return pd.DataFrame(columns=columns)
    return pd.read_json(path, orient="records", lines=True)
