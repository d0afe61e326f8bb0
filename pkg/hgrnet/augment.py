"""Geometric augmentation: offline 4x expansion and per-minibatch online transforms, masks kept in lockstep."""
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple, Union

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from hgrnet.data import DatasetSplit, SplitRole
from hgrnet.errors import DataError, ShapeError

logger = logging.getLogger(__name__)

cv2.setNumThreads(0)

OFFLINE_COPIES = 3


class AugmentMode(str, Enum):
    OFFLINE = "offline"
    ONLINE_STREAM = "online_stream"
    ONLINE_FUSION = "online_fusion"


class AugmentProfile(BaseModel):
    """Limits for each transform component.

    Online profiles draw every component uniformly in ``[-limit, +limit]`` (zoom in
    ``[1 - zoom, 1 + zoom]``). The offline profile draws zoom and translation
    magnitudes from ``[band_low, band_high]`` with a random sign and never rotates or shears.
    """

    model_config = ConfigDict(frozen=True)

    mode: AugmentMode
    rotation: float = Field(0.0, ge=0.0, le=180.0)
    shear: float = Field(0.0, ge=0.0, lt=1.0)
    zoom: float = Field(0.0, ge=0.0, lt=1.0)
    translation: float = Field(0.0, ge=0.0, lt=1.0)
    band_low: float = Field(0.15, ge=0.0, lt=1.0)
    band_high: float = Field(0.20, ge=0.0, lt=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_band(self) -> "AugmentProfile":
        if self.band_low > self.band_high:
            raise ValueError(f"band_low {self.band_low} exceeds band_high {self.band_high}")
        return self

    @classmethod
    def online_stream(cls, seed: int = 0) -> "AugmentProfile":
        return cls(mode=AugmentMode.ONLINE_STREAM, rotation=36.0, shear=0.20, zoom=0.10, translation=0.02, seed=seed)

    @classmethod
    def online_fusion(cls, seed: int = 0) -> "AugmentProfile":
        return cls(mode=AugmentMode.ONLINE_FUSION, rotation=41.0, shear=0.25, zoom=0.15, translation=0.15, seed=seed)

    @classmethod
    def offline(cls, seed: int = 0) -> "AugmentProfile":
        return cls(mode=AugmentMode.OFFLINE, zoom=0.20, translation=0.20, seed=seed)

    @classmethod
    def for_mode(cls, mode: Union[str, AugmentMode], seed: int = 0) -> "AugmentProfile":
        mode = AugmentMode(mode)
        return {
            AugmentMode.ONLINE_STREAM: cls.online_stream,
            AugmentMode.ONLINE_FUSION: cls.online_fusion,
            AugmentMode.OFFLINE: cls.offline,
        }[mode](seed)

    def admits(self, t: "AffineTransform", tol: float = 1e-9) -> bool:
        """True when every component of ``t`` lies within this profile's limits."""
        if self.mode == AugmentMode.OFFLINE:
            if t.rotation != 0.0 or t.shear != 0.0:
                return False
            zoom_ok = t.zoom == 1.0 or self.band_low - tol <= abs(t.zoom - 1.0) <= self.band_high + tol
            shifts_ok = all(s == 0.0 or self.band_low - tol <= abs(s) <= self.band_high + tol for s in (t.tx, t.ty))
            return zoom_ok and shifts_ok and not t.is_identity
        return (
            abs(t.rotation) <= self.rotation + tol
            and abs(t.shear) <= self.shear + tol
            and abs(t.zoom - 1.0) <= self.zoom + tol
            and abs(t.tx) <= self.translation + tol
            and abs(t.ty) <= self.translation + tol
        )


@dataclass(frozen=True)
class AffineTransform:
    """Rotation (degrees), x-shear factor, zoom factor and translation (fractions of width/height).

    The forward geometry is ``translate . zoom . shear . rotate`` about the image centre.
    Positive rotation turns content the way ``np.rot90`` does; positive translation
    moves content towards larger column/row indices; zoom above 1 enlarges content.
    """

    rotation: float = 0.0
    shear: float = 0.0
    zoom: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0.0 and self.shear == 0.0 and self.zoom == 1.0 and self.tx == 0.0 and self.ty == 0.0

    def matrix(self, height: int, width: int) -> np.ndarray:
        """2x3 matrix taking output pixel (x, y) to source coordinates."""
        theta = math.radians(self.rotation)
        cos, sin = math.cos(theta), math.sin(theta)
        inv_rotate = np.array([[cos, -sin], [sin, cos]])
        inv_shear = np.array([[1.0, -self.shear], [0.0, 1.0]])
        linear = inv_rotate @ inv_shear / self.zoom
        centre = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
        shift = np.array([self.tx * width, self.ty * height])
        offset = centre - linear @ (centre + shift)
        return np.hstack([linear, offset[:, None]])


def sample_transform(profile: AugmentProfile, rng: np.random.Generator) -> AffineTransform:
    if profile.mode != AugmentMode.OFFLINE:
        return AffineTransform(
            rotation=float(rng.uniform(-profile.rotation, profile.rotation)),
            shear=float(rng.uniform(-profile.shear, profile.shear)),
            zoom=float(rng.uniform(1.0 - profile.zoom, 1.0 + profile.zoom)),
            tx=float(rng.uniform(-profile.translation, profile.translation)),
            ty=float(rng.uniform(-profile.translation, profile.translation)),
        )

    def banded() -> float:
        return float(rng.choice((-1.0, 1.0)) * rng.uniform(profile.band_low, profile.band_high))

    # 0: zoom only, 1: translation only, 2: both
    components = int(rng.integers(3))
    zoom = 1.0 + banded() if components != 1 else 1.0
    tx = ty = 0.0
    if components != 0:
        # 0: horizontal, 1: vertical, 2: both
        axes = int(rng.integers(3))
        tx = banded() if axes != 1 else 0.0
        ty = banded() if axes != 0 else 0.0
    return AffineTransform(zoom=zoom, tx=tx, ty=ty)


def apply_transform(img: np.ndarray, t: AffineTransform, interp: str = "bilinear",
                    fill: Union[str, float] = "edge") -> np.ndarray:
    """Warp an ``H x W x C`` (or single-item ``1 x H x W x C``) array; output has the input's shape and dtype.

    ``fill`` is ``"edge"`` to replicate the border or a constant for out-of-bounds samples.
    """
    batched = img.ndim == 4
    if batched:
        if img.shape[0] != 1:
            raise ShapeError(f"apply_transform takes a single item, got batch of {img.shape[0]}")
        img = img[0]
    if img.ndim != 3:
        raise ShapeError(f"apply_transform expects H x W x C, got {img.shape}")
    if t.is_identity:
        out = img.copy()
        return out[None] if batched else out
    height, width, channels = img.shape
    flags = {"bilinear": cv2.INTER_LINEAR, "nearest": cv2.INTER_NEAREST}[interp] | cv2.WARP_INVERSE_MAP
    if fill == "edge":
        border, value = cv2.BORDER_REPLICATE, 0.0
    else:
        border, value = cv2.BORDER_CONSTANT, float(fill)
    warped = cv2.warpAffine(
        np.ascontiguousarray(img, dtype=np.float32),
        t.matrix(height, width),
        (width, height),
        flags=flags,
        borderMode=border,
        borderValue=(value,) * 4,
    )
    out = warped.reshape(height, width, channels).astype(img.dtype, copy=False)
    return out[None] if batched else out


def augment_pair(image: np.ndarray, mask: Optional[np.ndarray], profile: AugmentProfile,
                 rng: np.random.Generator) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Apply one sampled transform to an image and, if given, its mask."""
    if mask is not None and mask.shape[:2] != image.shape[:2]:
        raise ShapeError(f"image {image.shape[:2]} and mask {mask.shape[:2]} differ in size")
    t = sample_transform(profile, rng)
    warped = apply_transform(image, t, "bilinear", "edge")
    if mask is None:
        return warped, None
    return warped, apply_transform(mask, t, "nearest", 0.0)


def expand_offline(split: DatasetSplit, seed: int = 0, copies: int = OFFLINE_COPIES) -> DatasetSplit:
    """Originals followed by ``copies`` zoom/translation variants of each, ids suffixed ``_aug<k>``."""
    if split.role != SplitRole.TRAIN:
        raise DataError(f"offline augmentation only applies to the training split, not {split.role.value}")
    if not split.samples:
        raise DataError("cannot expand an empty training split")
    profile = AugmentProfile.offline(seed)
    streams = np.random.SeedSequence(seed).spawn(len(split.samples))
    expanded = list(split.samples)
    for sample, stream in zip(split.samples, streams):
        rng = np.random.default_rng(stream)
        for k in range(1, copies + 1):
            image, mask = augment_pair(sample.image, sample.mask, profile, rng)
            expanded.append(replace(sample, image=image, mask=mask, id=f"{sample.id}_aug{k}"))
    logger.info(f"Offline augmentation expanded {len(split.samples)} samples to {len(expanded)}")
    return DatasetSplit(split.role, expanded, split.num_classes, f"{split.provenance}; offline x{copies + 1} seed={seed}")
