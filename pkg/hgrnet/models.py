"""The segmentation network, the stream classifiers, the fused recognition network and parameter accounting."""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from hgrnet import checkpoint
from hgrnet.blocks import ASPP, SHORTCUT_MODES, STREAM_MIN_INPUT, ASPPSpec, ResGroup, ResidualUnitSpec, StreamBody
from hgrnet.errors import CheckpointError, ConfigurationError, ContractError, MissingCheckpointError, ShapeError
from hgrnet.layers import BatchNorm, Conv2D, Dense, Dropout, Module, Shape
from hgrnet.tensor import Tensor, add, bilinear_upsample, no_grad, sigmoid, softmax

logger = logging.getLogger(__name__)

STREAM_KINDS = {"shape": "shape_stream", "appearance": "appearance_stream", "shape_only": "shape_only"}
MODEL_KINDS = ("segmentation", "shape_stream", "appearance_stream", "shape_only", "hgrnet")


def _check_image_size(image_size: int) -> None:
    if image_size % 4 != 0 or image_size < STREAM_MIN_INPUT:
        raise ConfigurationError(f"image_size must be a multiple of 4 and >= {STREAM_MIN_INPUT}, got {image_size}")


def _check_input(x: Tensor, image_size: int, channels: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1:] != (image_size, image_size, channels):
        raise ShapeError(
            f"{what} expects N x {image_size} x {image_size} x {channels} input, got {x.shape}; resize in data loading"
        )


class SegmentationNet(Module):
    """Stage-1 network: stem conv, three residual groups, optional ASPP, 1x1 score conv, 4x upsample, sigmoid."""

    kind = "segmentation"

    def __init__(self, image_size: int = 320, use_aspp: bool = True, projection_shortcuts: str = "auto",
                 head_dropout: float = 0.2, seed: int = 0):
        super().__init__()
        _check_image_size(image_size)
        self.image_size = image_size
        self.use_aspp = use_aspp
        self.projection_shortcuts = projection_shortcuts
        rng = np.random.default_rng(seed)
        self.stem = Conv2D(3, 16, 3, rng)
        self.group1 = ResGroup(ResidualUnitSpec(16, 8, 32, 1), rng, projection_shortcuts=projection_shortcuts)
        self.group2 = ResGroup(ResidualUnitSpec(32, 16, 64, 2), rng, projection_shortcuts=projection_shortcuts)
        self.group3 = ResGroup(ResidualUnitSpec(64, 32, 128, 2), rng, projection_shortcuts=projection_shortcuts)
        self.aspp = ASPP(128, rng) if use_aspp else None
        self.head_dropout = Dropout(head_dropout)
        self.score = Conv2D(self.aspp.spec.out_channels if use_aspp else 128, 1, 1, rng)
        self.set_dropout_rng(np.random.default_rng([seed, 1]))
        self.name_variables()

    def groups(self) -> List[ResGroup]:
        return [self.group1, self.group2, self.group3]

    def features(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        for group in self.groups():
            x = group(x)
        return self.aspp(x) if self.aspp is not None else x

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self.image_size, 3, "segmentation network")
        logits = self.score(self.head_dropout(self.features(x)))
        return sigmoid(bilinear_upsample(logits, 4))

    def trace_shapes(self, batch: int = 1) -> List[Tuple[str, Shape]]:
        shape: Shape = (batch, self.image_size, self.image_size, 3)
        rows = []
        shape = self.stem.output_shape(shape)
        rows.append(("conv", shape))
        for index, group in enumerate(self.groups(), start=1):
            shape = group.output_shape(shape)
            rows.append((f"resgroup{index}", shape))
        if self.aspp is not None:
            shape = self.aspp.output_shape(shape)
            rows.append(("aspp", shape))
        shape = self.score.output_shape(shape)
        rows.append(("score", shape))
        n, h, w, c = shape
        rows.append(("upsample", (n, 4 * h, 4 * w, c)))
        return rows

    def output_shape(self, input_shape: Shape) -> Shape:
        return self.trace_shapes(input_shape[0])[-1][1]

    @property
    def convolution_count(self) -> int:
        """Stem plus three convs per residual unit; shortcuts are counted separately."""
        return 1 + sum(unit.convolution_count for group in self.groups() for unit in group.units())

    @property
    def shortcut_count(self) -> int:
        return sum(1 for group in self.groups() for unit in group.units() if unit.shortcut is not None)

    def metadata(self) -> Dict:
        return {
            "kind": self.kind,
            "image_size": self.image_size,
            "use_aspp": self.use_aspp,
            "projection_shortcuts": self.projection_shortcuts,
        }


class StreamClassifier(Module):
    """A stream body with a softmax head over C classes.

    The shape stream reads the continuous map of an attached, frozen segmentation
    network; the shape-only variant reads a binary mask directly.
    """

    def __init__(self, stream: str, num_classes: int = 10, image_size: int = 320,
                 dropout_before_fc1: float = 0.2, dropout_after_fc1: float = 0.3, seed: int = 0,
                 segmentation: Optional[SegmentationNet] = None):
        super().__init__()
        if stream not in STREAM_KINDS:
            raise ConfigurationError(f"stream must be one of {sorted(STREAM_KINDS)}, got {stream!r}")
        if num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
        _check_image_size(image_size)
        if stream == "appearance" and segmentation is not None:
            raise ContractError("the appearance stream does not use segmentation weights")
        self.stream = stream
        self.kind = STREAM_KINDS[stream]
        self.num_classes = num_classes
        self.image_size = image_size
        rng = np.random.default_rng(seed)
        self.body = StreamBody(3 if stream == "appearance" else 1, rng, dropout_before_fc1, dropout_after_fc1)
        self.head = Dense(self.body.fc2.out_features, num_classes, rng)
        self.set_dropout_rng(np.random.default_rng([seed, 2]))
        self.name_variables()
        object.__setattr__(self, "segmentation", None)
        if segmentation is not None:
            self.attach_segmentation(segmentation)

    def attach_segmentation(self, segmentation: SegmentationNet) -> None:
        if self.stream != "shape":
            raise ContractError(f"only the shape stream reads a segmentation map, not {self.stream}")
        if segmentation.image_size != self.image_size:
            raise ShapeError(f"segmentation image_size {segmentation.image_size} != stream image_size {self.image_size}")
        segmentation.freeze().eval()
        object.__setattr__(self, "segmentation", segmentation)

    def stream_input(self, x: Tensor) -> Tensor:
        if self.stream == "shape":
            if self.segmentation is None:
                raise MissingCheckpointError("stage-1")
            _check_input(x, self.image_size, 3, "shape stream")
            with no_grad():
                return self.segmentation(x)
        channels = 1 if self.stream == "shape_only" else 3
        _check_input(x, self.image_size, channels, f"{self.stream} stream")
        if self.stream == "shape_only" and not np.isin(x.data, (0, 1)).all():
            logger.warning("shape-only model received a non-binary mask; values outside {0, 1} are used as-is")
        return x

    def features(self, x: Tensor) -> Tensor:
        return self.body(self.stream_input(x))

    def forward(self, x: Tensor) -> Tensor:
        return softmax(self.head(self.features(x)))

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape[0], self.num_classes

    def metadata(self) -> Dict:
        return {"kind": self.kind, "image_size": self.image_size, "num_classes": self.num_classes}


def fuse_features(shape_features: Tensor, appearance_features: Tensor) -> Tensor:
    """Element-wise sum of the two 64-wide stream features."""
    return add(shape_features, appearance_features)


class HGRNet(Module):
    """Frozen segmentation network feeding the shape stream, appearance stream on RGB, summed features, softmax."""

    kind = "hgrnet"

    def __init__(self, num_classes: int = 10, image_size: int = 320, segmentation: Optional[SegmentationNet] = None,
                 use_aspp: bool = True, projection_shortcuts: str = "auto", dropout_before_fc1: float = 0.2,
                 dropout_after_fc1: float = 0.3, dropout_shape_fc2: float = 0.45,
                 dropout_appearance_fc2: float = 0.75, dropout_fusion: float = 0.45, seed: int = 0):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
        _check_image_size(image_size)
        self.num_classes = num_classes
        self.image_size = image_size
        self.segmentation_loaded = segmentation is not None
        if segmentation is None:
            segmentation = SegmentationNet(image_size, use_aspp, projection_shortcuts, seed=seed)
        elif segmentation.image_size != image_size:
            raise ShapeError(f"segmentation image_size {segmentation.image_size} != {image_size}")
        self.segmentation = segmentation
        rng = np.random.default_rng([seed, 3])
        self.shape_body = StreamBody(1, rng, dropout_before_fc1, dropout_after_fc1)
        self.appearance_body = StreamBody(3, rng, dropout_before_fc1, dropout_after_fc1)
        self.shape_dropout = Dropout(dropout_shape_fc2)
        self.appearance_dropout = Dropout(dropout_appearance_fc2)
        self.fusion_dropout = Dropout(dropout_fusion)
        self.classifier = Dense(self.shape_body.fc2.out_features, num_classes, rng)
        self.set_dropout_rng(np.random.default_rng([seed, 4]))
        self.name_variables()
        self.segmentation.freeze()
        self.train()

    def train(self, flag: bool = True) -> "HGRNet":
        super().train(flag)
        self.segmentation.train(False)
        return self

    def load_streams(self, shape: StreamClassifier, appearance: StreamClassifier) -> None:
        """Take the bodies of trained stream classifiers; their softmax heads are dropped."""
        if shape.stream != "shape" or appearance.stream != "appearance":
            raise ContractError(f"expected shape and appearance streams, got {shape.stream} and {appearance.stream}")
        self.shape_body.load_state_dict(shape.body.state_dict())
        self.appearance_body.load_state_dict(appearance.body.state_dict())
        if shape.segmentation is not None and not self.segmentation_loaded:
            self.segmentation.load_state_dict(shape.segmentation.state_dict())
            self.segmentation_loaded = True

    def load_segmentation(self, segmentation: SegmentationNet) -> None:
        self.segmentation.load_state_dict(segmentation.state_dict())
        self.segmentation.freeze()
        self.segmentation_loaded = True

    def freeze_pre_fc2(self) -> None:
        """Leave only the layers after fc2 (the classifier) trainable."""
        self.shape_body.freeze()
        self.appearance_body.freeze()

    def stream_features(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        if not self.segmentation_loaded:
            raise MissingCheckpointError("stage-1")
        _check_input(x, self.image_size, 3, "HGR-Net")
        with no_grad():
            seg_map = self.segmentation(x)
        return self.shape_body(seg_map), self.appearance_body(x)

    def forward(self, x: Tensor) -> Tensor:
        shape_features, appearance_features = self.stream_features(x)
        fused = fuse_features(self.shape_dropout(shape_features), self.appearance_dropout(appearance_features))
        return softmax(self.classifier(self.fusion_dropout(fused)))

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape[0], self.num_classes

    def metadata(self) -> Dict:
        meta = self.segmentation.metadata()
        meta.update({"kind": self.kind, "num_classes": self.num_classes})
        return meta


AnyModel = Union[SegmentationNet, StreamClassifier, HGRNet]


def predict(model: AnyModel, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode forward over a stacked array, batch by batch."""
    was_training = model.training
    model.eval()
    outputs = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                outputs.append(model(Tensor(images[start:start + batch_size])).data)
    finally:
        model.train(was_training)
    return np.concatenate(outputs, axis=0)


# --- parameter accounting ----------------------------------------------------------------------


class BlockCount(BaseModel):
    trainable: int = 0
    non_trainable: int = 0

    @property
    def total(self) -> int:
        return self.trainable + self.non_trainable


class ParameterReport(BaseModel):
    model_kind: str
    trainable: int
    non_trainable: int
    total: int
    per_block: Dict[str, BlockCount] = Field(default_factory=dict)
    convolution_layers: Optional[int] = None
    shortcut_convolutions: Optional[int] = None
    serialized_bytes: int = 0

    @property
    def megabytes(self) -> float:
        return self.serialized_bytes / 1e6

    def to_text(self) -> str:
        lines = [f"{'block':<36}{'trainable':>12}{'non-trainable':>15}{'total':>12}"]
        for name, count in self.per_block.items():
            lines.append(f"{name:<36}{count.trainable:>12,}{count.non_trainable:>15,}{count.total:>12,}")
        lines.append(f"{'TOTAL':<36}{self.trainable:>12,}{self.non_trainable:>15,}{self.total:>12,}")
        if self.convolution_layers is not None:
            lines.append(f"convolution layers: {self.convolution_layers} (+{self.shortcut_convolutions} projection shortcuts)")
        lines.append(f"parameters: {self.total:,} ({self.total / 1e6:.3f}M)")
        lines.append(f"serialized size: {self.serialized_bytes:,} bytes ({self.megabytes:.2f} MB)")
        return "\n".join(lines)


def _block_of(path: str, module: Module) -> str:
    parts = path.split(".")
    scope = ""
    if parts[0] == "segmentation":
        scope, parts = "segmentation.", parts[1:]
    if isinstance(module, BatchNorm):
        return scope + "batch_norm"
    top = parts[0]
    if top == "stem" or top.startswith("group"):
        return scope + ("shortcuts" if parts[-1] == "shortcut" else "trunk")
    if top == "aspp":
        return scope + "aspp"
    if top == "score":
        return scope + "seg_head"
    return scope + top


def count_parameters(model: AnyModel, breakdown: bool = True) -> ParameterReport:
    """Exact counts; running statistics are non-trainable, frozen Variables likewise."""
    roots = [("", model)]
    attached = getattr(model, "segmentation", None)
    if attached is not None and "segmentation" not in model._children:
        roots.append(("segmentation", attached))
    per_block: Dict[str, BlockCount] = {}
    for prefix, root in roots:
        for path, module in root.named_modules(prefix):
            if not path:
                continue
            size_t = sum(v.size for v in module._variables.values() if v.trainable)
            size_n = sum(v.size for v in module._variables.values() if not v.trainable)
            size_n += sum(a.size for a in module.buffers().values())
            if size_t == 0 and size_n == 0:
                continue
            block = per_block.setdefault(_block_of(path, module), BlockCount())
            block.trainable += int(size_t)
            block.non_trainable += int(size_n)
    trainable = sum(b.trainable for b in per_block.values())
    non_trainable = sum(b.non_trainable for b in per_block.values())
    segmentation = model if isinstance(model, SegmentationNet) else attached
    state = model.state_dict()
    if attached is not None and "segmentation" not in model._children:
        state.update({f"segmentation.{k}": v for k, v in attached.state_dict().items()})
    return ParameterReport(
        model_kind=model.kind,
        trainable=trainable,
        non_trainable=non_trainable,
        total=trainable + non_trainable,
        per_block=per_block if breakdown else {},
        convolution_layers=segmentation.convolution_count if segmentation is not None else None,
        shortcut_convolutions=segmentation.shortcut_count if segmentation is not None else None,
        serialized_bytes=len(checkpoint.encode_checkpoint(state, model.metadata())),
    )


REPORT_KINDS = ("stage1", "stage1-no-aspp", "shape-stream", "appearance-stream", "shape-only", "hgrnet")


def build_report_model(kind: str, num_classes: int = 10, image_size: int = 320,
                       projection_shortcuts: str = "auto", seed: int = 0) -> AnyModel:
    """Untrained model for one of the parameter-report kinds."""
    if kind not in REPORT_KINDS:
        raise ConfigurationError(f"unknown model kind {kind!r}; choose from {', '.join(REPORT_KINDS)}")
    if kind in ("stage1", "stage1-no-aspp"):
        return SegmentationNet(image_size, kind == "stage1", projection_shortcuts, seed=seed)
    if kind == "shape-stream":
        seg = SegmentationNet(image_size, True, projection_shortcuts, seed=seed)
        return StreamClassifier("shape", num_classes, image_size, seed=seed, segmentation=seg)
    if kind == "appearance-stream":
        return StreamClassifier("appearance", num_classes, image_size, seed=seed)
    if kind == "shape-only":
        return StreamClassifier("shape_only", num_classes, image_size, seed=seed)
    return HGRNet(num_classes, image_size, projection_shortcuts=projection_shortcuts, seed=seed)


def reconcile_parameter_counts(kind: str, num_classes: int = 10, image_size: int = 320) -> Dict[str, int]:
    """Totals under both shortcut conventions: identity where shape allows, or projection on every unit."""
    return {
        mode: count_parameters(build_report_model(kind, num_classes, image_size, mode), breakdown=False).total
        for mode in SHORTCUT_MODES
    }


# Published totals for ten classes; the shape-only variant has none.
PUBLISHED_PARAMETERS = {
    "stage1": 280_000,
    "stage1-no-aspp": 130_000,
    "shape-stream": 385_000,
    "appearance-stream": 106_000,
    "hgrnet": 499_000,
}
PUBLISHED_TOLERANCE = 0.15


def published_deltas(kind: str, totals: Dict[str, int], num_classes: int = 10) -> Optional[Dict[str, float]]:
    """Relative difference of each convention's total from the published one, or ``None`` if not comparable."""
    published = PUBLISHED_PARAMETERS.get(kind)
    if published is None or num_classes != 10:
        return None
    return {mode: (total - published) / published for mode, total in totals.items()}


# --- persistence -------------------------------------------------------------------------------


def save_model(model: AnyModel, path: Union[str, Path], step: Optional[str] = None) -> int:
    meta = model.metadata()
    if step is not None:
        meta["step"] = step
    return checkpoint.write_checkpoint(path, model.state_dict(), meta)


def build_model(meta: Dict) -> AnyModel:
    kind = meta.get("kind")
    image_size = int(meta.get("image_size", 320))
    if kind == "segmentation":
        return SegmentationNet(image_size, bool(meta.get("use_aspp", True)), meta.get("projection_shortcuts", "auto"))
    if kind in ("shape_stream", "appearance_stream", "shape_only"):
        stream = {v: k for k, v in STREAM_KINDS.items()}[kind]
        return StreamClassifier(stream, int(meta["num_classes"]), image_size)
    if kind == "hgrnet":
        seg = SegmentationNet(image_size, bool(meta.get("use_aspp", True)), meta.get("projection_shortcuts", "auto"))
        return HGRNet(int(meta["num_classes"]), image_size, segmentation=seg)
    raise CheckpointError(f"unknown model kind {kind!r} in checkpoint metadata")


def load_model(path: Union[str, Path], expected_kind: Optional[str] = None) -> Tuple[AnyModel, Dict]:
    """Rebuild a model from a checkpoint, validating kind and every tensor shape."""
    meta, records = checkpoint.read_checkpoint(path)
    if expected_kind is not None and meta.get("kind") != expected_kind:
        raise CheckpointError(f"{path}: expected a {expected_kind} checkpoint, found {meta.get('kind')}")
    model = build_model(meta)
    model.load_state_dict(records)
    logger.info(f"Loaded {meta.get('kind')} checkpoint from {path}")
    return model, meta
