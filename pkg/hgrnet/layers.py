"""Parameterised layers and the module tree that owns every Variable of a network."""
import logging
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from hgrnet.errors import CheckpointError, ConfigurationError, ContractError, ShapeError
from hgrnet.tensor import (
    RunningStats,
    Tensor,
    Variable,
    batch_norm,
    conv2d,
    conv_geometry,
    dense,
    dropout,
    get_default_dtype,
)

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


class Module:
    """Node of a network graph: named Variables, buffers and child modules, plus a train/eval mode."""

    def __init__(self):
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "_variables", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Variable):
            self._variables[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        return iter(self._children.items())

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_variables(self, prefix: str = "") -> Iterator[Tuple[str, Variable]]:
        for path, module in self.named_modules(prefix):
            for name, var in module._variables.items():
                yield (f"{path}.{name}" if path else name), var

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for path, module in self.named_modules(prefix):
            for name, array in module.buffers().items():
                yield (f"{path}.{name}" if path else name), array

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def variables(self) -> List[Variable]:
        return [v for _, v in self.named_variables()]

    def trainable_variables(self) -> List[Variable]:
        return [v for v in self.variables() if v.trainable]

    def name_variables(self) -> None:
        """Stamp every Variable with its dotted path from this module."""
        for path, var in self.named_variables():
            var.name = path

    def train(self, flag: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for var in self.variables():
            var.trainable = False
        return self

    def unfreeze(self) -> "Module":
        for var in self.variables():
            var.trainable = True
        return self

    def zero_grad(self) -> None:
        for var in self.variables():
            var.zero_grad()

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        for _, module in self.named_modules():
            if isinstance(module, Dropout):
                module.rng = rng

    def astype(self, dtype) -> "Module":
        for var in self.variables():
            var.astype(dtype)
        for _, module in self.named_modules():
            if isinstance(module, BatchNorm):
                module.stats.mean = module.stats.mean.astype(dtype)
                module.stats.var = module.stats.var.astype(dtype)
        return self

    def state_dict(self, copy: bool = False) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, var in self.named_variables():
            state[name] = var.data.copy() if copy else var.data
        for name, array in self.named_buffers():
            state[name] = array.copy() if copy else array
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy values in; every expected tensor must be present with a matching shape."""
        expected = self.state_dict()
        unexpected = sorted(set(state) - set(expected))
        if unexpected:
            raise CheckpointError(f"checkpoint holds tensors the model does not have: {', '.join(unexpected)}")
        for name, target in expected.items():
            if name not in state:
                raise CheckpointError(f"checkpoint is missing tensor {name}")
            source = np.asarray(state[name])
            if source.shape != target.shape:
                raise CheckpointError(f"tensor {name}: checkpoint shape {source.shape} != model shape {target.shape}")
            target[...] = source
        for _, module in self.named_modules():
            if isinstance(module, BatchNorm):
                module.stats.updates = max(module.stats.updates, 1)

    def parameter_count(self, trainable_only: bool = False) -> int:
        total = sum(v.size for v in self.variables() if v.trainable or not trainable_only)
        if not trainable_only:
            total += sum(a.size for _, a in self.named_buffers())
        return int(total)

    def output_shape(self, input_shape: Shape) -> Shape:
        raise NotImplementedError


def he_normal(rng: np.random.Generator, shape: Shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(get_default_dtype())


class Conv2D(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, padding: str = "same", use_bias: bool = True):
        super().__init__()
        if padding not in ("same", "valid"):
            raise ConfigurationError(f"padding must be 'same' or 'valid', got {padding!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        fan_in = kernel_size * kernel_size * in_channels
        self.kernel = Variable(he_normal(rng, (kernel_size, kernel_size, in_channels, out_channels), fan_in), "kernel")
        self.bias = Variable(np.zeros(out_channels), "bias") if use_bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, self.stride, self.dilation, self.padding)

    def output_shape(self, input_shape: Shape) -> Shape:
        n, h, w, c = input_shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        oh, _, _ = conv_geometry(h, self.kernel_size, self.stride, self.dilation, self.padding, "height")
        ow, _, _ = conv_geometry(w, self.kernel_size, self.stride, self.dilation, self.padding, "width")
        return n, oh, ow, self.out_channels


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.99, epsilon: float = 1e-3):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Variable(np.ones(channels), "gamma")
        self.beta = Variable(np.zeros(channels), "beta")
        self.stats = RunningStats.initial(channels)

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.stats.mean, "running_var": self.stats.var}

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"batch norm expects {self.channels} channels, got {x.shape[-1]}")
        return batch_norm(x, self.gamma, self.beta, self.stats, self.mode, self.momentum, self.epsilon)

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Variable(he_normal(rng, (in_features, out_features), in_features), "weight")
        self.bias = Variable(np.zeros(out_features), "bias")

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)

    def output_shape(self, input_shape: Shape) -> Shape:
        if input_shape[-1] != self.in_features:
            raise ShapeError(f"dense expects width {self.in_features}, got {input_shape[-1]}")
        return input_shape[0], self.out_features


class Dropout(Module):
    def __init__(self, rate: float, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.rate = rate
        self.rng = rng

    @property
    def rate(self) -> float:
        return self._rate

    @rate.setter
    def rate(self, value: float) -> None:
        if not 0.0 <= value < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {value}")
        object.__setattr__(self, "_rate", float(value))

    def forward(self, x: Tensor) -> Tensor:
        if self.training and self.rate > 0 and self.rng is None:
            raise ContractError("dropout layer has no generator; call set_dropout_rng first")
        return dropout(x, self.rate, self.mode, self.rng)

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape
