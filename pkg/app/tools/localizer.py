"""
Attention map to instance patches: threshold, group, rank, map and crop
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

from app.config.settings import LocalizerConfig
from app.errors import UsageError
from app.tensor.tape import Tape, Value


@dataclass(frozen=True)
class InstanceBox:
    """Inclusive-exclusive box [row0, row1) x [col0, col1) with its score."""

    row0: int
    col0: int
    row1: int
    col1: int
    score: float = 0.0
    area: int = 0  # mask pixels of the component; 0 when unknown
    component: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def coords(self) -> Tuple[int, int, int, int]:
        return (self.row0, self.col0, self.row1, self.col1)

    @property
    def box_area(self) -> int:
        return (self.row1 - self.row0) * (self.col1 - self.col0)

    def to_line(self) -> str:
        """Plain-text form ``row0 col0 row1 col1 score``."""
        return f"{self.row0} {self.col0} {self.row1} {self.col1} {self.score:.10g}"


def _as_map(omega) -> np.ndarray:
    array = np.asarray(omega.data if isinstance(omega, Value) else omega, dtype=np.float64)
    if array.ndim == 4:
        if array.shape[:2] != (1, 1):
            raise UsageError(f"expected a single (1, 1, h, w) attention map, got {array.shape}")
        array = array[0, 0]
    if array.ndim != 2:
        raise UsageError(f"attention map must be 2-D, got shape {array.shape}")
    return array


def threshold_mask(omega, tau: float) -> np.ndarray:
    """
    Binary mask of positions with Omega >= tau * max(Omega).

    Args:
        omega: Attention map, (1, 1, h, w) or (h, w)
        tau: Relative threshold in (0, 1)

    Returns:
        uint8 mask of shape (h, w); all zero when max(Omega) <= 0
    """
    if not 0.0 < tau < 1.0:
        raise UsageError(f"relative threshold must lie in (0, 1), got {tau}")
    values = _as_map(omega)
    peak = values.max()
    if peak <= 0.0:
        return np.zeros(values.shape, dtype=np.uint8)
    return (values >= tau * peak).astype(np.uint8)


def connected_components(mask: np.ndarray, min_component_area: int = 1) -> List[InstanceBox]:
    """
    Tight boxes around the 4-connected components of a binary mask.

    Components with fewer than ``min_component_area`` pixels are dropped; the
    result is ordered by (row0, col0).
    """
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if not mask.any():
        return []

    count, labels, stats, _ = cv2.connectedComponentsWithStats(mask, connectivity=4, ltype=cv2.CV_32S)
    boxes = []
    for label in range(1, count):  # label 0 is the background
        area = int(stats[label, cv2.CC_STAT_AREA])
        if area < min_component_area:
            continue
        top = int(stats[label, cv2.CC_STAT_TOP])
        left = int(stats[label, cv2.CC_STAT_LEFT])
        boxes.append(
            InstanceBox(
                row0=top,
                col0=left,
                row1=top + int(stats[label, cv2.CC_STAT_HEIGHT]),
                col1=left + int(stats[label, cv2.CC_STAT_WIDTH]),
                area=area,
                component=labels == label,
            )
        )
    boxes.sort(key=lambda box: (box.row0, box.col0))
    return boxes


def select_top_k(boxes: Sequence[InstanceBox], omega, k: int) -> List[InstanceBox]:
    """
    Rank boxes by the attention mass of their component and keep the best k.

    Ties go to the larger component, then to the smaller (row0, col0). An empty
    input yields one fallback box covering the whole map.
    """
    if k < 1:
        raise UsageError(f"k must be at least 1, got {k}")
    values = _as_map(omega)
    height, width = values.shape

    if not boxes:
        return [InstanceBox(0, 0, height, width, score=float(values.sum()), area=height * width)]

    scored = []
    for box in boxes:
        if box.component is not None:
            score = float(values[box.component].sum())
            area = box.area or int(box.component.sum())
        else:
            score = float(values[box.row0 : box.row1, box.col0 : box.col1].sum())
            area = box.area or box.box_area
        scored.append(
            InstanceBox(box.row0, box.col0, box.row1, box.col1, score, area, box.component)
        )
    scored.sort(key=lambda box: (-box.score, -box.area, box.row0, box.col0))
    return scored[:k]


def map_box_to_image(
    box: InstanceBox, map_dims: Tuple[int, int], image_dims: Tuple[int, int]
) -> InstanceBox:
    """
    Scale a map-coordinate box to image pixels, rounding outward and clamping.

    Starts use floor(v * H / h), ends ceil(v * H / h), in exact integer arithmetic.
    """
    h, w = map_dims
    height, width = image_dims
    if min(h, w, height, width) < 1:
        raise UsageError(f"dimensions must be positive: map {map_dims}, image {image_dims}")

    row0 = (box.row0 * height) // h
    col0 = (box.col0 * width) // w
    row1 = -((-box.row1 * height) // h)
    col1 = -((-box.col1 * width) // w)
    return InstanceBox(
        row0=min(max(row0, 0), height - 1),
        col0=min(max(col0, 0), width - 1),
        row1=min(max(row1, 1), height),
        col1=min(max(col1, 1), width),
        score=box.score,
        area=box.area,
    )


def crop_resize(tape: Tape, image: Value, box: InstanceBox, out: int) -> Value:
    """Crop ``box`` from a (1, c, H, W) image and resample it bilinearly to out x out."""
    if box.row1 <= box.row0 or box.col1 <= box.col0:
        raise UsageError(f"degenerate crop box {box.coords}: zero area")
    return tape.crop_resize(image, box.coords, out)


@dataclass
class Localization:
    """Boxes chosen on one attention map."""

    map_boxes: List[InstanceBox]
    pixel_boxes: List[InstanceBox]
    mask: np.ndarray


def localize(omega, image_dims: Tuple[int, int], config: LocalizerConfig) -> Localization:
    """Threshold, group, rank and map one attention map to at most top_k pixel boxes."""
    values = _as_map(omega)
    mask = threshold_mask(values, config.rel_threshold)
    components = connected_components(mask, config.min_component_area)
    chosen = select_top_k(components, values, config.top_k)
    pixel_boxes = [map_box_to_image(box, values.shape, image_dims) for box in chosen]
    return Localization(map_boxes=chosen, pixel_boxes=pixel_boxes, mask=mask)


def boxes_union_mask(boxes: Sequence[InstanceBox], dims: Tuple[int, int]) -> np.ndarray:
    """Boolean raster of the union of boxes on an image of the given dims."""
    union = np.zeros(dims, dtype=bool)
    for box in boxes:
        union[box.row0 : box.row1, box.col0 : box.col1] = True
    return union


def union_iou(
    predicted: Sequence[InstanceBox], truth: Sequence[InstanceBox], dims: Tuple[int, int]
) -> float:
    """IoU between the union of predicted boxes and the union of true boxes."""
    a = boxes_union_mask(predicted, dims)
    b = boxes_union_mask(truth, dims)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _intersection_area(a: InstanceBox, b: InstanceBox) -> int:
    rows = min(a.row1, b.row1) - max(a.row0, b.row0)
    cols = min(a.col1, b.col1) - max(a.col0, b.col0)
    return max(rows, 0) * max(cols, 0)


def covered_fraction(
    predicted: Sequence[InstanceBox], truth: Sequence[InstanceBox], min_cover: float = 0.5
) -> Tuple[int, int]:
    """
    Count true boxes with more than ``min_cover`` of their area inside some single predicted box.

    Returns:
        (covered, total)
    """
    covered = 0
    for box in truth:
        if not box.box_area:
            continue
        best = max((_intersection_area(box, other) for other in predicted), default=0)
        covered += int(best / box.box_area > min_cover)
    return covered, len(truth)
