"""Dataset loading, writing and the seeded synthetic gesture generator."""
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import cv2
import numpy as np
import pandas as pd
from PIL import Image

from hgrnet.errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

IMAGE_SIZE = 320
MAX_SYNTHETIC_CLASSES = 10


class SplitRole(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


def one_hot(class_index: int, num_classes: int) -> np.ndarray:
    if not 0 <= class_index < num_classes:
        raise DataError(f"class index {class_index} outside [0, {num_classes})")
    vector = np.zeros(num_classes, dtype=np.float32)
    vector[class_index] = 1.0
    return vector


@dataclass
class Sample:
    """An RGB image in [0, 1], an optional binary mask and an optional one-hot label."""

    image: np.ndarray
    mask: Optional[np.ndarray] = None
    label: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"sample {self.id}: image must be H x W x 3, got {self.image.shape}")
        if self.mask is not None:
            if self.mask.shape != self.image.shape[:2] + (1,):
                raise DataError(f"sample {self.id}: mask shape {self.mask.shape} does not match image {self.image.shape}")
            if not np.isin(self.mask, (0, 1)).all():
                raise DataError(f"sample {self.id}: mask values must be 0 or 1")
        if self.label is not None and self.label.sum() != 1.0:
            raise DataError(f"sample {self.id}: label is not one-hot")

    @property
    def class_index(self) -> Optional[int]:
        return None if self.label is None else int(np.argmax(self.label))


@dataclass
class DatasetSplit:
    role: SplitRole
    samples: List[Sample]
    num_classes: int
    provenance: str = "real"

    def __post_init__(self):
        self.role = SplitRole(self.role)
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"{self.role.value} split has duplicate sample ids: {', '.join(dupes[:5])}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def has_masks(self) -> bool:
        return bool(self.samples) and all(s.mask is not None for s in self.samples)

    @property
    def has_labels(self) -> bool:
        return bool(self.samples) and all(s.label is not None for s in self.samples)

    def images(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        return np.stack([self.samples[i].image for i in self._indices(indices)]).astype(np.float32)

    def masks(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        return np.stack([self.samples[i].mask for i in self._indices(indices)]).astype(np.float32)

    def labels(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        return np.stack([self.samples[i].label for i in self._indices(indices)]).astype(np.float32)

    def class_indices(self) -> np.ndarray:
        return np.array([s.class_index for s in self.samples], dtype=np.int64)

    def subset(self, indices: Sequence[int], role: Optional[SplitRole] = None) -> "DatasetSplit":
        return DatasetSplit(role or self.role, [self.samples[i] for i in indices], self.num_classes, self.provenance)

    def _indices(self, indices: Optional[Sequence[int]]) -> Sequence[int]:
        return range(len(self.samples)) if indices is None else indices


# --- disk layout -------------------------------------------------------------------------------


def _read_png(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert(mode))


def _resize(array: np.ndarray, size: int, interpolation: int) -> np.ndarray:
    if array.shape[:2] == (size, size):
        return array
    return cv2.resize(array, (size, size), interpolation=interpolation)


def read_image(path: Union[str, Path], image_size: int = IMAGE_SIZE) -> np.ndarray:
    """RGB PNG as float32 in [0, 1], bilinearly resized to ``image_size`` square."""
    rgb = _read_png(Path(path), "RGB").astype(np.float32) / 255.0
    return _resize(rgb, image_size, cv2.INTER_LINEAR)


def read_mask(path: Union[str, Path], image_size: int = IMAGE_SIZE) -> np.ndarray:
    """Grayscale PNG, nearest-resized and binarised at 0.5, shaped ``H x W x 1``."""
    gray = _read_png(Path(path), "L").astype(np.float32) / 255.0
    return (_resize(gray, image_size, cv2.INTER_NEAREST) >= 0.5).astype(np.float32)[..., None]


def write_probability_map(prob: np.ndarray, path: Union[str, Path]) -> Path:
    """Save an ``H x W (x 1)`` map in [0, 1] as an 8-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round(np.squeeze(prob, axis=-1) * 255.0 if prob.ndim == 3 else prob * 255.0), 0, 255)
    Image.fromarray(pixels.astype(np.uint8), "L").save(path)
    return path


def load_dataset(root: Union[str, Path], split: Union[str, SplitRole], num_classes: int = 10,
                 image_size: int = IMAGE_SIZE) -> DatasetSplit:
    """Read ``root/<split>/images/*.png`` with optional stem-matched masks and ``labels.csv``."""
    role = SplitRole(split)
    base = Path(root) / role.value
    image_dir = base / "images"
    if not image_dir.is_dir():
        raise DataError(f"no image directory at {image_dir}")
    image_paths = {p.stem: p for p in sorted(image_dir.glob("*.png"))}
    mask_dir = base / "masks"
    mask_paths = {p.stem: p for p in sorted(mask_dir.glob("*.png"))} if mask_dir.is_dir() else {}
    orphans = sorted(set(mask_paths) - set(image_paths))
    if orphans:
        raise DataError(f"{role.value}: masks without matching images: {', '.join(orphans[:5])}")

    labels: Dict[str, int] = {}
    labels_path = base / "labels.csv"
    if labels_path.is_file():
        frame = pd.read_csv(labels_path, dtype={"stem": str, "class": "int64"}, encoding="utf-8")
        if list(frame.columns) != ["stem", "class"]:
            raise DataError(f"{labels_path}: expected header 'stem,class', got {','.join(frame.columns)}")
        labels = dict(zip(frame["stem"], frame["class"].astype(int)))

    samples = []
    for stem in sorted(image_paths):
        image = read_image(image_paths[stem], image_size)
        mask = read_mask(mask_paths[stem], image_size) if stem in mask_paths else None
        label = one_hot(labels[stem], num_classes) if stem in labels else None
        samples.append(Sample(image=image, mask=mask, label=label, id=stem))
    logger.info(f"Loaded {len(samples)} {role.value} samples from {base} (masks: {len(mask_paths)}, labels: {len(labels)})")
    return DatasetSplit(role, samples, num_classes, provenance=f"loaded from {base}")


def write_dataset(split: DatasetSplit, root: Union[str, Path]) -> Path:
    """Write a split in the layout ``load_dataset`` reads; PNG encoding is deterministic."""
    base = Path(root) / split.role.value
    (base / "images").mkdir(parents=True, exist_ok=True)
    if split.has_masks:
        (base / "masks").mkdir(parents=True, exist_ok=True)
    for sample in split.samples:
        pixels = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, "RGB").save(base / "images" / f"{sample.id}.png")
        if sample.mask is not None:
            mask = (sample.mask[..., 0] * 255).astype(np.uint8)
            Image.fromarray(mask, "L").save(base / "masks" / f"{sample.id}.png")
    if split.has_labels:
        frame = pd.DataFrame({"stem": [s.id for s in split.samples], "class": split.class_indices()})
        frame.to_csv(base / "labels.csv", index=False, lineterminator="\n", encoding="utf-8")
    logger.info(f"Wrote {len(split)} {split.role.value} samples to {base}")
    return base


# --- synthetic gestures ------------------------------------------------------------------------


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(6, 6, 3)).astype(np.float32)
    smooth = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    grain = rng.normal(0.0, 0.04, size=(size, size, 3)).astype(np.float32)
    return np.clip(0.15 + 0.7 * smooth + grain, 0.0, 1.0)


def _skin_tone(rng: np.random.Generator) -> np.ndarray:
    hsv = np.array([[[rng.uniform(5, 25), rng.uniform(90, 170), rng.uniform(150, 240)]]], dtype=np.uint8)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0, 0].astype(np.float32) / 255.0


def _gesture_mask(rng: np.random.Generator, prongs: int, size: int) -> np.ndarray:
    """Palm ellipse plus ``prongs`` finger-like bars fanned above it."""
    mask = np.zeros((size, size), dtype=np.uint8)
    scale = rng.uniform(0.85, 1.15) * size
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    cy = size * 0.58 + rng.uniform(-0.06, 0.06) * size
    heading = rng.uniform(-15.0, 15.0)
    palm = (int(round(0.13 * scale)), int(round(0.15 * scale)))
    cv2.ellipse(mask, (int(round(cx)), int(round(cy))), palm, heading, 0, 360, 1, thickness=-1)
    if prongs:
        spread = np.linspace(-50.0, 50.0, prongs) if prongs > 1 else np.zeros(1)
        length, half_width = 0.30 * scale, 0.025 * scale
        for offset in spread:
            angle = np.radians(heading + offset - 90.0)
            direction = np.array([np.cos(angle), np.sin(angle)])
            normal = np.array([-direction[1], direction[0]])
            base = np.array([cx, cy]) + direction * 0.08 * scale
            tip = base + direction * length
            corners = np.array([base + normal * half_width, tip + normal * half_width,
                                tip - normal * half_width, base - normal * half_width])
            cv2.fillConvexPoly(mask, np.round(corners).astype(np.int32), 1)
    return mask


def _render(rng: np.random.Generator, class_index: int, size: int) -> Sample:
    mask = _gesture_mask(rng, class_index, size).astype(np.float32)[..., None]
    shading = np.linspace(0.85, 1.1, size, dtype=np.float32)[:, None, None]
    hand = np.clip(_skin_tone(rng) * shading, 0.0, 1.0)
    image = _textured_background(rng, size) * (1.0 - mask) + hand * mask
    return Sample(image=image.astype(np.float32), mask=mask, label=None)


def generate_synthetic(counts: Sequence[int] = (200, 50, 50), num_classes: int = 4, seed: int = 7,
                       image_size: int = IMAGE_SIZE) -> Dict[SplitRole, DatasetSplit]:
    """Three splits of textured backgrounds with a gesture whose finger count is the class index."""
    if num_classes < 2:
        raise ConfigurationError(f"synthetic data needs at least 2 classes, got {num_classes}")
    if num_classes > MAX_SYNTHETIC_CLASSES:
        raise ConfigurationError(f"synthetic gestures support at most {MAX_SYNTHETIC_CLASSES} classes")
    if len(counts) != 3 or min(counts) < 0:
        raise ConfigurationError(f"need three non-negative split sizes, got {counts}")
    roles = [SplitRole.TRAIN, SplitRole.VALIDATION, SplitRole.TEST]
    splits = {}
    for role, count, stream in zip(roles, counts, np.random.SeedSequence(seed).spawn(3)):
        rng = np.random.default_rng(stream)
        samples = []
        for i in range(count):
            class_index = i % num_classes
            sample = _render(rng, class_index, image_size)
            sample.label = one_hot(class_index, num_classes)
            sample.id = f"{role.value}_{i:05d}"
            samples.append(sample)
        splits[role] = DatasetSplit(role, samples, num_classes, provenance=f"synthetic seed={seed}")
        logger.info(f"Generated {count} synthetic {role.value} samples")
    return splits


def write_provenance(root: Union[str, Path], splits: Dict[SplitRole, DatasetSplit], seed: int) -> Path:
    path = Path(root) / "provenance.json"
    payload = {
        "seed": seed,
        "num_classes": next(iter(splits.values())).num_classes,
        "splits": {role.value: len(split) for role, split in splits.items()},
        "source": "synthetic",
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
