"""
Image reading and writing: PPM / PGM through OpenCV, channels-first float arrays in memory
"""

from pathlib import Path
from typing import List, Optional, Sequence

import cv2
import numpy as np

from app.errors import ShapeError
from app.tools.localizer import InstanceBox

IMAGE_SUFFIXES = (".ppm", ".pgm", ".png", ".jpg", ".jpeg", ".bmp")
FLAT_MAP_TOLERANCE = 1e-9


def read_image(path: Path) -> np.ndarray:
    """
    Load an image file as a (3, H, W) float64 RGB array in [0, 1].

    Grayscale files are replicated to three channels.
    """
    pixels = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if pixels is None:
        raise OSError(f"could not read image {path}")
    rgb = cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB)
    return np.transpose(rgb, (2, 0, 1)).astype(np.float64) / 255.0


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: Path, image: np.ndarray) -> Path:
    """Write a (3, H, W) RGB float image in [0, 1]; the suffix picks the format."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {image.shape}")
    bgr = cv2.cvtColor(np.ascontiguousarray(np.transpose(to_uint8(image), (1, 2, 0))), cv2.COLOR_RGB2BGR)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), bgr):
        raise OSError(f"could not write image {path}")
    return path


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scale a 2-D map to uint8 0..255; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got {values.shape}")
    low, high = values.min(), values.max()
    # resampling a constant map can leave rounding-level ripple
    if high - low <= FLAT_MAP_TOLERANCE * max(abs(high), abs(low), 1.0):
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - low) / (high - low) * 255.0).astype(np.uint8)


def upsample_map(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling of a 2-D map to (height, width)."""
    return cv2.resize(
        np.asarray(values, dtype=np.float64), (width, height), interpolation=cv2.INTER_LINEAR
    )


def write_map(path: Path, values: np.ndarray, size: Optional[Sequence[int]] = None) -> Path:
    """Write a 2-D map as an 8-bit PGM, optionally upsampled to ``size`` = (H, W) first."""
    values = np.asarray(values, dtype=np.float64)
    if size is not None:
        values = upsample_map(values, int(size[0]), int(size[1]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), normalize_map(values)):
        raise OSError(f"could not write map {path}")
    return path


def write_boxes(path: Path, boxes: Sequence[InstanceBox]) -> Path:
    """One ``row0 col0 row1 col1 score`` line per box."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{box.to_line()}\n" for box in boxes))
    return path


def read_boxes(path: Path) -> List[InstanceBox]:
    """Inverse of ``write_boxes``; a missing score column reads as 0."""
    boxes = []
    for line in Path(path).read_text().splitlines():
        fields = line.split()
        if not fields:
            continue
        row0, col0, row1, col1 = (int(v) for v in fields[:4])
        score = float(fields[4]) if len(fields) > 4 else 0.0
        boxes.append(InstanceBox(row0, col0, row1, col1, score=score))
    return boxes
