"""
Deterministic synthetic fine-grained multi-instance dataset

Every image holds 1..max_instances "vesicle" glyphs (a filled disk with a rim)
on a value-noise background with distractor squares. The class is the rim
thickness ratio of the glyphs and nothing else: background, glyph count and
positions are drawn from the seed alone.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from app.config.settings import SynthConfig
from app.errors import UsageError
from app.tensor.kernels import bilinear_matrix
from app.tools.image_io import IMAGE_SUFFIXES, read_boxes, read_image, write_boxes, write_image
from app.tools.localizer import InstanceBox

logger = logging.getLogger(__name__)

FILL_COLOUR = np.array([0.8, 0.5, 0.2])
RIM_COLOUR = np.array([0.2, 0.5, 0.8])
NOISE_GRID = 5
GLYPH_MARGIN = 2
PLACEMENT_ATTEMPTS = 200
MANIFEST_NAME = "manifest.csv"


@dataclass
class SynthSample:
    """One labelled image; ``gt_boxes`` is None for images without box annotations."""

    image: np.ndarray  # (3, H, W) in [0, 1]
    label: int
    gt_boxes: Optional[List[InstanceBox]] = None
    seed: Optional[int] = None


class ManifestRow(BaseModel):
    """One line of an exported dataset's manifest."""

    file: str = Field(..., description="Image path relative to the dataset directory")
    label: int = Field(..., description="Class index")
    seed: int = Field(..., description="Generator seed of the sample")
    boxes_file: str = Field(..., description="Sidecar with one 'row0 col0 row1 col1 score' line per box")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    grid = rng.uniform(0.35, 0.65, size=(3, NOISE_GRID, NOISE_GRID))
    resample = bilinear_matrix(NOISE_GRID, size)
    return np.einsum("ph,chw,qw->cpq", resample, grid, resample)


def _add_distractors(rng: np.random.Generator, image: np.ndarray, config: SynthConfig) -> None:
    size = config.image_size
    count = rng.poisson(config.clutter_density * size * size / 4096.0)
    for _ in range(count):
        side = int(rng.integers(3, 9))
        row, col = (int(v) for v in rng.integers(0, size - side, size=2))
        image[:, row : row + side, col : col + side] = rng.uniform(0.2, 0.8)


def _overlaps(box: Tuple[int, int, int, int], placed: List[Tuple[int, int, int, int]]) -> bool:
    row0, col0, row1, col1 = box
    for other in placed:
        if (
            row0 < other[2] + GLYPH_MARGIN
            and other[0] < row1 + GLYPH_MARGIN
            and col0 < other[3] + GLYPH_MARGIN
            and other[1] < col1 + GLYPH_MARGIN
        ):
            return True
    return False


def _place_glyphs(
    rng: np.random.Generator, config: SynthConfig
) -> List[Tuple[int, int, int]]:
    """Non-overlapping (centre_row, centre_col, radius) triples, all inside the image."""
    size = config.image_size
    wanted = int(rng.integers(config.min_instances, config.max_instances + 1))
    glyphs: List[Tuple[int, int, int]] = []
    placed: List[Tuple[int, int, int, int]] = []
    for _ in range(PLACEMENT_ATTEMPTS):
        if len(glyphs) == wanted:
            break
        radius = int(rng.integers(config.glyph_radius_min, config.glyph_radius_max + 1))
        row, col = (int(v) for v in rng.integers(radius, size - radius, size=2))
        box = (row - radius, col - radius, row + radius + 1, col + radius + 1)
        if _overlaps(box, placed):
            continue
        glyphs.append((row, col, radius))
        placed.append(box)
    return glyphs


def _draw_glyph(image: np.ndarray, row: int, col: int, radius: int, rim_ratio: float) -> None:
    rows, cols = np.ogrid[: image.shape[1], : image.shape[2]]
    distance = np.sqrt((rows - row) ** 2 + (cols - col) ** 2)
    inner = radius - rim_ratio * radius
    rim = (distance <= radius) & (distance > inner)
    fill = distance <= inner
    image[:, fill] = FILL_COLOUR[:, np.newaxis]
    image[:, rim] = RIM_COLOUR[:, np.newaxis]


def gen_sample(seed: int, label: int, config: SynthConfig) -> SynthSample:
    """
    Generate one image of class ``label``; bit-identical for equal (seed, label, config).

    Args:
        seed: Generator seed
        label: Class index in [0, num_classes)
        config: Dataset settings

    Returns:
        The sample with its ground-truth glyph boxes
    """
    if not 0 <= label < config.num_classes:
        raise UsageError(f"class {label} out of range for {config.num_classes} classes")

    rng = np.random.default_rng(seed)
    image = _background(rng, config.image_size)
    _add_distractors(rng, image, config)
    glyphs = _place_glyphs(rng, config)

    rim_ratio = config.rim_ratios[label]
    boxes = []
    for row, col, radius in glyphs:
        _draw_glyph(image, row, col, radius, rim_ratio)
        boxes.append(InstanceBox(row - radius, col - radius, row + radius + 1, col + radius + 1))

    image += rng.normal(0.0, config.noise_amplitude, size=image.shape)
    return SynthSample(image=np.clip(image, 0.0, 1.0), label=label, gt_boxes=boxes, seed=seed)


def gen_dataset(n_per_class: int, base_seed: int, config: SynthConfig) -> List[SynthSample]:
    """Balanced dataset; sample i of class c uses seed base_seed + c * n_per_class + i."""
    if n_per_class < 1:
        raise UsageError(f"n_per_class must be at least 1, got {n_per_class}")
    return [
        gen_sample(base_seed + label * n_per_class + index, label, config)
        for label in range(config.num_classes)
        for index in range(n_per_class)
    ]


def held_out_base_seed(n_train: int, base_seed: int, config: SynthConfig) -> int:
    """First seed of the test split, right after the last train seed."""
    return base_seed + config.num_classes * n_train


def gen_splits(
    n_train: int, n_test: int, base_seed: int, config: SynthConfig
) -> Tuple[List[SynthSample], List[SynthSample]]:
    """Train and test datasets over disjoint seed ranges; test seeds follow the last train seed."""
    train = gen_dataset(n_train, base_seed, config)
    test = gen_dataset(n_test, held_out_base_seed(n_train, base_seed, config), config)
    return train, test


def export_dataset(samples: List[SynthSample], out_dir: Path) -> Path:
    """
    Write samples as PPM images with box sidecars and a manifest.

    Args:
        samples: Samples to write
        out_dir: Target directory, created if missing

    Returns:
        Path of the written manifest
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, sample in enumerate(samples):
        stem = f"{index:05d}_c{sample.label}"
        write_image(out_dir / f"{stem}.ppm", sample.image)
        write_boxes(out_dir / f"{stem}.boxes.txt", sample.gt_boxes or [])
        rows.append(
            ManifestRow(
                file=f"{stem}.ppm",
                label=sample.label,
                seed=-1 if sample.seed is None else sample.seed,
                boxes_file=f"{stem}.boxes.txt",
            )
        )

    manifest = out_dir / MANIFEST_NAME
    pd.DataFrame([row.model_dump() for row in rows]).to_csv(manifest, index=False)
    logger.info(f"Exported {len(rows)} samples to {out_dir}")
    return manifest


def load_dataset_dir(data_dir: Path) -> List[SynthSample]:
    """Read a directory written by ``export_dataset``."""
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {data_dir}")

    samples = []
    for record in pd.read_csv(manifest).to_dict(orient="records"):
        row = ManifestRow.model_validate(record)
        samples.append(
            SynthSample(
                image=read_image(data_dir / row.file),
                label=row.label,
                gt_boxes=read_boxes(data_dir / row.boxes_file),
                seed=row.seed,
            )
        )
    return samples


def load_image_dir(data_dir: Path) -> Tuple[List[SynthSample], List[str]]:
    """
    Read a raw image directory with one sub-directory per class.

    Classes are numbered in sorted sub-directory order; samples carry no boxes.

    Returns:
        (samples, class names)
    """
    data_dir = Path(data_dir)
    class_dirs = sorted(path for path in data_dir.iterdir() if path.is_dir())
    if not class_dirs:
        raise FileNotFoundError(f"no class sub-directories in {data_dir}")

    samples = []
    for label, class_dir in enumerate(class_dirs):
        for path in sorted(class_dir.iterdir()):
            if path.suffix.lower() in IMAGE_SUFFIXES:
                samples.append(SynthSample(image=read_image(path), label=label))
    return samples, [path.name for path in class_dirs]


def load_samples(data_dir: Path) -> List[SynthSample]:
    """Exported dataset when a manifest is present, else a class-per-directory tree."""
    if (Path(data_dir) / MANIFEST_NAME).is_file():
        return load_dataset_dir(data_dir)
    samples, names = load_image_dir(data_dir)
    logger.info(f"Loaded {len(samples)} images over classes {names}")
    return samples
