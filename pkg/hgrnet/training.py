"""Losses, the Adam optimizer and the three-step training paradigm."""
import logging
import queue
import threading
import time
from collections import OrderedDict
from contextlib import closing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from hgrnet import checkpoint
from hgrnet.augment import AugmentMode, AugmentProfile, augment_pair, expand_offline
from hgrnet.data import DatasetSplit, SplitRole
from hgrnet.errors import CheckpointError, ConfigurationError, ContractError, DataError, MissingCheckpointError, NumericError, ShapeError
from hgrnet.evaluation import confusion, macro_f_score, micro_f_score, pixel_f_score
from hgrnet.layers import Module
from hgrnet.models import HGRNet, SegmentationNet, StreamClassifier, load_model, predict, save_model
from hgrnet.tensor import Tensor, Variable, backward

logger = logging.getLogger(__name__)

PROBABILITY_CLAMP = 1e-7
PREFETCH_POLL_SECONDS = 0.05
MAX_ADAM_STEPS = 2 ** 62


class TrainStep(str, Enum):
    SEGMENTATION = "segmentation"
    SHAPE_STREAM = "shape_stream"
    APPEARANCE_STREAM = "appearance_stream"
    SHAPE_ONLY = "shape_only"
    FUSION = "fusion"


STREAM_STEPS = {
    "shape": TrainStep.SHAPE_STREAM,
    "appearance": TrainStep.APPEARANCE_STREAM,
    "shape_only": TrainStep.SHAPE_ONLY,
}

_STREAM_DROPOUT = {"before_fc1": 0.20, "after_fc1": 0.30}

STEP_DEFAULTS: Dict[TrainStep, Dict] = {
    TrainStep.SEGMENTATION: {
        "batch_size": 8,
        "dropout": {"aspp_head": 0.20},
        "augment_profile": AugmentMode.ONLINE_FUSION,
    },
    TrainStep.SHAPE_STREAM: {"batch_size": 2, "dropout": dict(_STREAM_DROPOUT), "augment_profile": AugmentMode.ONLINE_STREAM},
    TrainStep.APPEARANCE_STREAM: {"batch_size": 2, "dropout": dict(_STREAM_DROPOUT), "augment_profile": AugmentMode.ONLINE_STREAM},
    TrainStep.SHAPE_ONLY: {"batch_size": 2, "dropout": dict(_STREAM_DROPOUT), "augment_profile": AugmentMode.ONLINE_STREAM},
    TrainStep.FUSION: {
        "batch_size": 2,
        "dropout": dict(_STREAM_DROPOUT, appearance_fc2=0.75, shape_fc2=0.45, fusion=0.45),
        "augment_profile": AugmentMode.ONLINE_FUSION,
    },
}


class TrainPlan(BaseModel):
    """Hyperparameters of one training step."""

    model_config = ConfigDict(extra="forbid")

    step: TrainStep
    learning_rate: float = Field(0.001, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(1e-8, gt=0.0)
    batch_size: int = Field(2, ge=1)
    max_epochs: int = Field(150, ge=1)
    dropout: Dict[str, float] = Field(default_factory=dict)
    augment_profile: AugmentMode = AugmentMode.ONLINE_STREAM
    online_augmentation: bool = True
    offline_augmentation: bool = True
    freeze_pre_fc2: bool = False
    seed: int = 0
    validation_batch_size: int = Field(8, ge=1)
    prefetch: int = Field(0, ge=0)

    @field_validator("dropout")
    @classmethod
    def _check_rates(cls, rates: Dict[str, float]) -> Dict[str, float]:
        for name, rate in rates.items():
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate {name}={rate} outside [0, 1)")
        return rates

    @classmethod
    def for_step(cls, step: Union[str, TrainStep], **overrides) -> "TrainPlan":
        """Published defaults for ``step``; every override that changes a default is logged."""
        step = TrainStep(step)
        values = {k: (dict(v) if isinstance(v, dict) else v) for k, v in STEP_DEFAULTS[step].items()}
        defaults = cls.model_fields
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "dropout":
                unknown = sorted(set(value) - set(values["dropout"]))
                if unknown:
                    raise ConfigurationError(f"{step.value} has no dropout layers named {', '.join(unknown)}")
                for name, rate in value.items():
                    if rate != values["dropout"][name]:
                        logger.warning(f"{step.value}: dropout {name} overridden {values['dropout'][name]} -> {rate}")
                    values["dropout"][name] = rate
                continue
            current = values.get(key, defaults[key].default if key in defaults else None)
            if value != current:
                logger.warning(f"{step.value}: {key} overridden {current} -> {value}")
            values[key] = value
        try:
            return cls(step=step, **values)
        except ValueError as e:
            raise ConfigurationError(f"invalid {step.value} plan: {e}") from e

    def profile(self) -> Optional[AugmentProfile]:
        return AugmentProfile.for_mode(self.augment_profile, self.seed) if self.online_augmentation else None


# --- losses ------------------------------------------------------------------------------------


def _targets(y, like: Tensor) -> np.ndarray:
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if y.shape != like.shape:
        raise ShapeError(f"prediction shape {like.shape} != target shape {y.shape}")
    return y.astype(like.dtype, copy=False)


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to ``[1e-7, 1 - 1e-7]``.

    The clamp bounds the loss value only; saturated predictions still get a gradient.
    """
    y = _targets(y, p)
    q = np.clip(p.data, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    out = np.asarray(-(y * np.log(q) + (1.0 - y) * np.log(1.0 - q)).mean(), dtype=p.dtype)

    def grad_fn(grad: np.ndarray):
        return (grad * (q - y) / (q * (1.0 - q)) / p.size,)

    return Tensor.from_op(out, "bce_loss", (p,), grad_fn)


def categorical_cross_entropy(p: Tensor, y) -> Tensor:
    """Batch mean of ``-sum(y * log p)`` for one-hot targets ``(N, C)``.

    ``log p`` is clamped like :func:`bce_loss`; the gradient uses the clamped ``p`` in the
    denominator but is never zeroed, so a confidently wrong softmax can still recover.
    """
    y = _targets(y, p)
    q = np.clip(p.data, PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    batch = p.shape[0]
    out = np.asarray(-(y * np.log(q)).sum() / batch, dtype=p.dtype)

    def grad_fn(grad: np.ndarray):
        return (grad * (-y / q) / batch,)

    return Tensor.from_op(out, "categorical_cross_entropy", (p,), grad_fn)


# --- optimizer ---------------------------------------------------------------------------------


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    t: int = 0
    epsilon: float = 1e-8


def adam_step(state: AdamState, variables: Iterable[Variable], lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999) -> None:
    """One bias-corrected Adam update of every trainable Variable; gradients are left in place."""
    if state.t >= MAX_ADAM_STEPS:
        raise NumericError(f"Adam timestep overflow at t={state.t}")
    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    seen = set()
    for var in variables:
        if not var.trainable:
            continue
        if var.name in seen:
            raise ContractError(f"two variables share the name {var.name!r}")
        seen.add(var.name)
        m = state.m.setdefault(var.name, np.zeros_like(var.data))
        v = state.v.setdefault(var.name, np.zeros_like(var.data))
        if m.shape != var.shape:
            raise ShapeError(f"optimizer moment for {var.name} has shape {m.shape}, variable {var.shape}")
        m *= beta1
        m += (1.0 - beta1) * var.grad
        v *= beta2
        v += (1.0 - beta2) * np.square(var.grad)
        var.data -= (lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)).astype(var.dtype, copy=False)


def save_optimizer_state(state: AdamState, path: Union[str, Path], metadata: Optional[Dict] = None) -> int:
    records: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name in state.m:
        records[f"{name}.m"] = state.m[name]
        records[f"{name}.v"] = state.v[name]
    records["t"] = np.asarray(state.t, dtype=np.int64)
    meta = {"kind": "adam", "epsilon": state.epsilon}
    meta.update(metadata or {})
    return checkpoint.write_checkpoint(path, records, meta)


def load_optimizer_state(path: Union[str, Path]) -> AdamState:
    meta, records = checkpoint.read_checkpoint(path)
    if meta.get("kind") != "adam":
        raise CheckpointError(f"{path} is not an optimizer state file")
    state = AdamState(t=int(records.pop("t")), epsilon=float(meta.get("epsilon", 1e-8)))
    for name, array in records.items():
        base, _, moment = name.rpartition(".")
        getattr(state, moment)[base] = array
    return state


# --- minibatches -------------------------------------------------------------------------------


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray


def iterate_minibatches(split: DatasetSplit, batch_size: int, rng: np.random.Generator,
                        profile: Optional[AugmentProfile], inputs: str = "image", targets: str = "label") -> Iterator[Batch]:
    """Shuffled minibatches; each sample is augmented with its own draw, the mask in lockstep with the image."""
    needs_mask = "mask" in (inputs, targets)
    order = rng.permutation(len(split))
    for start in range(0, len(order), batch_size):
        xs, ys = [], []
        for index in order[start:start + batch_size]:
            sample = split.samples[index]
            image, mask = sample.image, sample.mask if needs_mask else None
            if profile is not None:
                image, mask = augment_pair(image, mask, profile, rng)
            fields = {"image": image, "mask": mask, "label": sample.label}
            xs.append(fields[inputs])
            ys.append(fields[targets])
        yield Batch(np.stack(xs).astype(np.float32), np.stack(ys).astype(np.float32))


class _Failure:
    def __init__(self, error: BaseException):
        self.error = error


def prefetch(batches: Iterator[Batch], depth: int) -> Iterator[Batch]:
    """Assemble minibatches ahead of the training loop on a worker thread, bounded by ``depth``."""
    if depth <= 0:
        yield from batches
        return
    slots: "queue.Queue" = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def put(item) -> bool:
        while not stop.is_set():
            try:
                slots.put(item, timeout=PREFETCH_POLL_SECONDS)
                return True
            except queue.Full:
                continue
        return False

    def worker():
        try:
            for batch in batches:
                if not put(batch):
                    return
        except BaseException as e:
            put(_Failure(e))
        finally:
            put(done)

    thread = threading.Thread(target=worker, name="hgrnet-prefetch", daemon=True)
    thread.start()
    try:
        while True:
            item = slots.get()
            if item is done:
                return
            if isinstance(item, _Failure):
                raise item.error
            yield item
    finally:
        # consumer stopped early or finished; release a worker blocked on a full queue
        stop.set()
        thread.join()


# --- training loop -----------------------------------------------------------------------------


class TrainRecord(BaseModel):
    epoch: int
    loss: float
    validation_metric: float
    validation_accuracy: Optional[float] = None
    checkpoint: Optional[str] = None
    seconds: float

    def log_line(self) -> str:
        return f"epoch {self.epoch} loss {self.loss:.6f} val {self.validation_metric:.6f} seconds {self.seconds:.3f}"


@dataclass
class TrainResult:
    step: TrainStep
    records: List[TrainRecord]
    best: TrainRecord
    model: Module
    optimizer: AdamState
    checkpoint_path: Optional[Path] = None

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]


Validator = Callable[[Module, DatasetSplit], Tuple[float, Optional[float]]]
LossFn = Callable[[Tensor, np.ndarray], Tensor]


def _segmentation_metric(batch_size: int) -> Validator:
    def validate(model: Module, split: DatasetSplit) -> Tuple[float, Optional[float]]:
        maps = predict(model, split.images(), batch_size)
        return pixel_f_score(maps, split.masks()), None

    return validate


def _recognition_metric(batch_size: int, inputs: str) -> Validator:
    def validate(model: Module, split: DatasetSplit) -> Tuple[float, Optional[float]]:
        x = split.masks() if inputs == "mask" else split.images()
        matrix = confusion(predict(model, x, batch_size).argmax(axis=1), split.class_indices(), split.num_classes)
        return macro_f_score(matrix), micro_f_score(matrix)

    return validate


def _dump_and_abort(model: Module, run_dir: Optional[Path], epoch: int, batch_index: int, value: float) -> None:
    detail = f"non-finite loss {value} at epoch {epoch}, batch {batch_index}"
    if run_dir is not None:
        dump = run_dir / "nan_dump.hgrn"
        checkpoint.write_checkpoint(dump, model.state_dict(), {"kind": "dump", "epoch": epoch, "batch": batch_index})
        detail += f"; model state dumped to {dump}"
    logger.error(detail)
    raise NumericError(detail)


def fit(step: TrainStep, model: Module, plan: TrainPlan, train: DatasetSplit, validation: DatasetSplit,
        loss_fn: LossFn, validate: Validator, inputs: str, targets: str,
        run_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """Run ``plan.max_epochs`` epochs of Adam and keep the weights of the best validation epoch."""
    if not train.samples:
        raise DataError(f"{step.value}: the training split is empty")
    if not validation.samples:
        raise DataError(f"{step.value}: the validation split is empty")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    variables = model.trainable_variables()
    logger.info(f"{step.value}: {sum(v.size for v in variables):,} trainable parameters in {len(variables)} tensors")
    state = AdamState(epsilon=plan.epsilon)
    rng = np.random.default_rng([plan.seed, 101])
    profile = plan.profile()
    records: List[TrainRecord] = []
    best: Optional[TrainRecord] = None
    best_state = None
    log = open(run_dir / "train.log", "w", encoding="utf-8") if run_dir is not None else None
    try:
        for epoch in range(plan.max_epochs):
            started = time.perf_counter()
            model.train()
            losses = []
            batches = iterate_minibatches(train, plan.batch_size, rng, profile, inputs, targets)
            with closing(prefetch(batches, plan.prefetch)) as stream:
                for batch_index, batch in enumerate(stream):
                    model.zero_grad()
                    loss = loss_fn(model(Tensor(batch.inputs)), batch.targets)
                    value = loss.item()
                    if not np.isfinite(value):
                        _dump_and_abort(model, run_dir, epoch, batch_index, value)
                    backward(loss)
                    adam_step(state, variables, plan.learning_rate, plan.beta1, plan.beta2)
                    losses.append(value)
            metric, accuracy = validate(model, validation)
            record = TrainRecord(epoch=epoch, loss=float(np.mean(losses)), validation_metric=metric,
                                 validation_accuracy=accuracy, seconds=time.perf_counter() - started)
            records.append(record)
            if best is None or record.validation_metric > best.validation_metric:
                best, best_state = record, model.state_dict(copy=True)
            logger.info(f"{step.value}: {record.log_line()}")
            if log is not None:
                log.write(record.log_line() + "\n")
                log.flush()
    finally:
        if log is not None:
            log.close()

    model.load_state_dict(best_state)
    model.eval()
    result = TrainResult(step, records, best, model, state)
    if run_dir is not None:
        result.checkpoint_path = run_dir / "best.hgrn"
        save_model(model, result.checkpoint_path, step=step.value)
        best.checkpoint = str(result.checkpoint_path)
        save_optimizer_state(state, run_dir / "optimizer.hgrn", {"step": step.value})
    logger.info(f"{step.value}: best epoch {best.epoch} with validation metric {best.validation_metric:.4f}")
    return result


def _check_plan(plan: TrainPlan, step: TrainStep) -> None:
    if plan.step != step:
        raise ContractError(f"plan is for step {plan.step.value}, not {step.value}")


def _training_split(train: DatasetSplit, plan: TrainPlan) -> DatasetSplit:
    return expand_offline(train, plan.seed) if plan.offline_augmentation else train


def _image_size(split: DatasetSplit) -> int:
    if not split.samples:
        raise DataError(f"{split.role.value} split is empty")
    return split.samples[0].image.shape[0]


def train_segmentation(train: DatasetSplit, validation: DatasetSplit, plan: TrainPlan,
                       run_dir: Optional[Union[str, Path]] = None, use_aspp: bool = True,
                       projection_shortcuts: str = "auto") -> TrainResult:
    """Step 1: pixelwise binary cross-entropy on the sigmoid map, validated by pixel F-score."""
    _check_plan(plan, TrainStep.SEGMENTATION)
    for split in (train, validation):
        if not split.has_masks:
            raise DataError(f"segmentation training needs masks in the {split.role.value} split")
    model = SegmentationNet(_image_size(train), use_aspp, projection_shortcuts,
                            head_dropout=plan.dropout["aspp_head"], seed=plan.seed)
    return fit(TrainStep.SEGMENTATION, model, plan, _training_split(train, plan), validation, bce_loss,
               _segmentation_metric(plan.validation_batch_size), "image", "mask", run_dir)


SegmentationSource = Union[str, Path, SegmentationNet, None]


def _load_segmentation(source: SegmentationSource) -> SegmentationNet:
    if source is None:
        raise MissingCheckpointError("stage-1")
    if isinstance(source, SegmentationNet):
        return source
    if not Path(source).is_file():
        raise MissingCheckpointError("stage-1", str(source))
    model, _ = load_model(source, expected_kind="segmentation")
    return model


def train_stream(train: DatasetSplit, validation: DatasetSplit, which: str, plan: TrainPlan,
                 seg_checkpoint: SegmentationSource = None, run_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """Step 2: one stream body plus a temporary softmax head, categorical cross-entropy, macro F validation.

    ``which`` is ``shape`` (needs the stage-1 network), ``appearance`` (must not get one)
    or ``shape_only`` (reads ground-truth masks, no stage-1 network).
    """
    if which not in STREAM_STEPS:
        raise ConfigurationError(f"stream must be one of {sorted(STREAM_STEPS)}, got {which!r}")
    step = STREAM_STEPS[which]
    _check_plan(plan, step)
    if which != "shape" and seg_checkpoint is not None:
        raise ContractError(f"the {which} stream does not use segmentation weights")
    segmentation = _load_segmentation(seg_checkpoint) if which == "shape" else None
    for split in (train, validation):
        if not split.has_labels:
            raise DataError(f"stream training needs labels in the {split.role.value} split")
        if which == "shape_only" and not split.has_masks:
            raise DataError(f"the shape-only stream needs masks in the {split.role.value} split")
    model = StreamClassifier(which, train.num_classes, _image_size(train), plan.dropout["before_fc1"],
                             plan.dropout["after_fc1"], seed=plan.seed, segmentation=segmentation)
    inputs = "mask" if which == "shape_only" else "image"
    return fit(step, model, plan, _training_split(train, plan), validation, categorical_cross_entropy,
               _recognition_metric(plan.validation_batch_size, inputs), inputs, "label", run_dir)


def _load_stream(source: Union[str, Path, StreamClassifier, None], which: str) -> StreamClassifier:
    step = f"{which} stream"
    if isinstance(source, StreamClassifier):
        return source
    if source is None or not Path(source).is_file():
        raise MissingCheckpointError(step, None if source is None else str(source))
    model, _ = load_model(source, expected_kind=STREAM_STEPS[which].value)
    return model


def build_fusion_model(seg_checkpoint: SegmentationSource, shape_checkpoint, appearance_checkpoint,
                       plan: TrainPlan, num_classes: int) -> HGRNet:
    segmentation = _load_segmentation(seg_checkpoint)
    shape = _load_stream(shape_checkpoint, "shape")
    appearance = _load_stream(appearance_checkpoint, "appearance")
    for stream in (shape, appearance):
        if stream.num_classes != num_classes:
            raise CheckpointError(f"{stream.kind} checkpoint has {stream.num_classes} classes, data has {num_classes}")
    rates = plan.dropout
    model = HGRNet(num_classes, segmentation.image_size, segmentation=segmentation,
                   dropout_before_fc1=rates["before_fc1"], dropout_after_fc1=rates["after_fc1"],
                   dropout_shape_fc2=rates["shape_fc2"], dropout_appearance_fc2=rates["appearance_fc2"],
                   dropout_fusion=rates["fusion"], seed=plan.seed)
    model.load_streams(shape, appearance)
    if plan.freeze_pre_fc2:
        model.freeze_pre_fc2()
    return model


def train_fusion(train: DatasetSplit, validation: DatasetSplit, seg_checkpoint: SegmentationSource,
                 shape_checkpoint, appearance_checkpoint, plan: TrainPlan,
                 run_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """Step 3: fine-tune both streams and the classifier (or only the classifier) on the summed features."""
    _check_plan(plan, TrainStep.FUSION)
    for split in (train, validation):
        if not split.has_labels:
            raise DataError(f"fusion training needs labels in the {split.role.value} split")
    model = build_fusion_model(seg_checkpoint, shape_checkpoint, appearance_checkpoint, plan, train.num_classes)
    return fit(TrainStep.FUSION, model, plan, _training_split(train, plan), validation, categorical_cross_entropy,
               _recognition_metric(plan.validation_batch_size, "image"), "image", "label", run_dir)


def cross_validate_segmentation(split: DatasetSplit, plan: TrainPlan, folds: int = 3, train_fraction: float = 0.66,
                                run_dir: Optional[Union[str, Path]] = None) -> List[float]:
    """Repeated random train/validation splits of one dataset, each training part expanded 4x offline."""
    if folds < 1 or not 0.0 < train_fraction < 1.0:
        raise ConfigurationError(f"need folds >= 1 and train_fraction in (0, 1), got {folds}, {train_fraction}")
    count = len(split)
    cut = int(round(train_fraction * count))
    if cut < 1 or cut >= count:
        raise DataError(f"{count} samples cannot be split {train_fraction:.2f}/{1 - train_fraction:.2f}")
    fold_plan = plan.model_copy(update={"offline_augmentation": True})
    scores = []
    for fold in range(folds):
        order = np.random.default_rng([plan.seed, 1000 + fold]).permutation(count)
        train = split.subset(order[:cut], SplitRole.TRAIN)
        validation = split.subset(order[cut:], SplitRole.VALIDATION)
        fold_dir = Path(run_dir) / f"fold{fold + 1}" if run_dir is not None else None
        result = train_segmentation(train, validation, fold_plan, fold_dir)
        scores.append(result.best.validation_metric)
        logger.info(f"cross-validation fold {fold + 1}/{folds}: pixel F-score {scores[-1]:.4f}")
    logger.info(f"cross-validation mean pixel F-score {np.mean(scores):.4f} over {folds} folds")
    return scores
