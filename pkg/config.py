"""Configuration management for the hand gesture recognition pipeline."""
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from hgrnet.errors import ConfigurationError

# Load environment variables
load_dotenv()


class Config:
    """Process-wide defaults."""

    SEED = int(os.getenv("HGR_SEED", "0"))
    THREADS = int(os.getenv("HGR_THREADS", "1"))
    IMAGE_SIZE = int(os.getenv("HGR_IMAGE_SIZE", "320"))
    NUM_CLASSES = int(os.getenv("HGR_NUM_CLASSES", "10"))
    LOG_LEVEL = os.getenv("HGR_LOG_LEVEL", "INFO")
    OUTPUT_DIR = os.getenv("HGR_OUTPUT_DIR", "runs")

    LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

    @classmethod
    def validate(cls):
        """Validate environment-derived settings."""
        if cls.THREADS < 1:
            raise ConfigurationError(f"HGR_THREADS must be >= 1, got {cls.THREADS}")
        if cls.IMAGE_SIZE % 4 != 0:
            raise ConfigurationError(f"HGR_IMAGE_SIZE must be a multiple of 4, got {cls.IMAGE_SIZE}")
        if cls.NUM_CLASSES < 2:
            raise ConfigurationError(f"HGR_NUM_CLASSES must be >= 2, got {cls.NUM_CLASSES}")
        if cls.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigurationError(f"HGR_LOG_LEVEL {cls.LOG_LEVEL!r} is not a logging level")

    @classmethod
    def setup_logging(cls, level: Optional[str] = None):
        logging.basicConfig(
            level=getattr(logging, (level or cls.LOG_LEVEL).upper(), logging.INFO),
            format=cls.LOG_FORMAT,
            datefmt=cls.LOG_DATE_FORMAT,
        )


class RunConfig(BaseModel):
    """Flat ``key = value`` run configuration; unset keys keep the published defaults."""

    model_config = ConfigDict(extra="forbid")

    data_root: Optional[str] = None
    output_dir: Optional[str] = None
    seed: int = Field(default_factory=lambda: Config.SEED)
    threads: int = Field(default_factory=lambda: Config.THREADS, ge=1)
    image_size: int = Field(default_factory=lambda: Config.IMAGE_SIZE)
    num_classes: int = Field(default_factory=lambda: Config.NUM_CLASSES, ge=2)

    synth_train: int = Field(200, ge=0)
    synth_validation: int = Field(50, ge=0)
    synth_test: int = Field(50, ge=0)

    learning_rate: Optional[float] = None
    beta1: Optional[float] = None
    beta2: Optional[float] = None
    seg_batch_size: Optional[int] = None
    stream_batch_size: Optional[int] = None
    fusion_batch_size: Optional[int] = None
    seg_epochs: Optional[int] = None
    stream_epochs: Optional[int] = None
    fusion_epochs: Optional[int] = None
    seg_dropout_head: Optional[float] = None
    stream_dropout_before_fc1: Optional[float] = None
    stream_dropout_after_fc1: Optional[float] = None
    fusion_dropout_appearance_fc2: Optional[float] = None
    fusion_dropout_shape_fc2: Optional[float] = None
    fusion_dropout_after_fusion: Optional[float] = None
    online_augmentation: Optional[bool] = None
    offline_augmentation: Optional[bool] = None
    freeze_pre_fc2: Optional[bool] = None
    validation_batch_size: Optional[int] = None
    prefetch: Optional[int] = None

    use_aspp: bool = True
    projection_shortcuts: str = "auto"
    seg_checkpoint: Optional[str] = None
    shape_checkpoint: Optional[str] = None
    appearance_checkpoint: Optional[str] = None

    latency_warmup: int = Field(2, ge=1)
    latency_iters: int = Field(10, ge=1)

    @field_validator("image_size")
    @classmethod
    def _image_size(cls, value: int) -> int:
        if value % 4 != 0 or value < 107:
            raise ValueError(f"image_size must be a multiple of 4 and >= 107, got {value}")
        return value

    @field_validator("projection_shortcuts")
    @classmethod
    def _shortcuts(cls, value: str) -> str:
        if value not in ("auto", "all"):
            raise ValueError(f"projection_shortcuts must be 'auto' or 'all', got {value!r}")
        return value

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None, **overrides) -> "RunConfig":
        """Parse a config file (``#`` comments allowed); keyword overrides win over the file."""
        values: Dict[str, Any] = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigurationError(f"config file not found: {path}")
            for key, value in dotenv_values(path, encoding="utf-8").items():
                if value is None:
                    raise ConfigurationError(f"{path}: key {key!r} has no value")
                values[key] = value
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**values)
        except ValidationError as e:
            unknown = [err["loc"][0] for err in e.errors() if err["type"] == "extra_forbidden"]
            if unknown:
                raise ConfigurationError(f"unknown config keys: {', '.join(map(str, unknown))}") from e
            raise ConfigurationError(f"invalid configuration: {e}") from e

    def dump(self, path: Union[str, Path]) -> Path:
        """Echo the effective configuration in the same syntax ``load`` reads."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["# effective configuration"]
        for key, value in self.model_dump().items():
            if value is None:
                continue
            text = str(value).lower() if isinstance(value, bool) else str(value)
            lines.append(f"{key} = {text}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def plan_overrides(self, step: str) -> Dict[str, Any]:
        """TrainPlan keyword overrides for one step (``None`` entries mean keep the default)."""
        common = {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "online_augmentation": self.online_augmentation,
            "offline_augmentation": self.offline_augmentation,
            "validation_batch_size": self.validation_batch_size,
            "prefetch": self.prefetch,
            "seed": self.seed,
        }
        stream_dropout = {
            "before_fc1": self.stream_dropout_before_fc1,
            "after_fc1": self.stream_dropout_after_fc1,
        }
        if step == "segmentation":
            specific = {"batch_size": self.seg_batch_size, "max_epochs": self.seg_epochs,
                        "dropout": {"aspp_head": self.seg_dropout_head}}
        elif step == "fusion":
            specific = {
                "batch_size": self.fusion_batch_size,
                "max_epochs": self.fusion_epochs,
                "freeze_pre_fc2": self.freeze_pre_fc2,
                "dropout": dict(stream_dropout, appearance_fc2=self.fusion_dropout_appearance_fc2,
                                shape_fc2=self.fusion_dropout_shape_fc2, fusion=self.fusion_dropout_after_fusion),
            }
        else:
            specific = {"batch_size": self.stream_batch_size, "max_epochs": self.stream_epochs,
                        "dropout": stream_dropout}
        specific["dropout"] = {k: v for k, v in specific["dropout"].items() if v is not None}
        return {**common, **specific}
