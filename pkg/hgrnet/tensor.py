"""Dense NHWC tensors, differentiable layer primitives and reverse-mode gradients.

Feature maps are rank-4 ``(batch, height, width, channels)`` arrays; per-item
vectors (pooled features, logits, class distributions) are rank-2
``(batch, channels)``. Every primitive records an :class:`OpNode` on its output
when at least one input requires a gradient, and :func:`backward` replays the
recorded nodes in reverse topological order.
"""
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hgrnet.errors import ConfigurationError, ContractError, ShapeError

logger = logging.getLogger(__name__)

_local = threading.local()
_pool_lock = threading.Lock()
_num_threads = 1
_executor: Optional[ThreadPoolExecutor] = None


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for the current thread."""
    previous = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Create tensors and variables in ``dtype`` inside the block (float64 for gradient checks)."""
    previous = get_default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


def set_num_threads(count: int) -> None:
    """Set the number of worker threads kernels may split a batch across."""
    global _num_threads, _executor
    if count < 1:
        raise ConfigurationError(f"thread count must be >= 1, got {count}")
    with _pool_lock:
        if _executor is not None:
            _executor.shutdown(wait=True)
            _executor = None
        _num_threads = int(count)
        if _num_threads > 1:
            _executor = ThreadPoolExecutor(max_workers=_num_threads, thread_name_prefix="hgrnet-kernel")
    logger.info(f"Kernel thread count set to {_num_threads}")


def get_num_threads() -> int:
    return _num_threads


def _map_batches(fn: Callable[[int, int], np.ndarray], batch: int) -> List[np.ndarray]:
    """Run ``fn(lo, hi)`` over contiguous batch chunks, results in chunk order."""
    chunks = min(_num_threads, batch)
    if chunks <= 1 or _executor is None:
        return [fn(0, batch)]
    bounds = np.linspace(0, batch, chunks + 1).astype(int)
    futures = [_executor.submit(fn, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    return [f.result() for f in futures]


@dataclass
class OpNode:
    """Record of one primitive application: the inputs and the rule mapping the output gradient to input gradients."""

    op: str
    inputs: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A numpy array plus the bookkeeping reverse-mode differentiation needs."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[OpNode] = None

    @classmethod
    def from_op(cls, data: np.ndarray, op: str, inputs: Sequence["Tensor"], backward) -> "Tensor":
        """Wrap an op result, recording the node only if a gradient can flow through it."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node = None
        out.requires_grad = False
        if _grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = OpNode(op, tuple(inputs), backward)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Variable(Tensor):
    """A named trainable leaf whose gradient is accumulated across backward passes."""

    def __init__(self, value, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(np.array(value, dtype=dtype if dtype is not None else get_default_dtype()))
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def assign(self, array: np.ndarray) -> None:
        """Overwrite the value in place, keeping shape and dtype."""
        array = np.asarray(array)
        if array.shape != self.data.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {array.shape} to {self.data.shape}")
        self.data[...] = array

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Variable({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.node is not None:
            for parent in node.node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any trainable variable")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.node is None:
            if node.grad is None:
                node.grad = grad.copy()
            else:
                node.grad += grad
            continue
        for parent, parent_grad in zip(node.node.inputs, node.node.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def _require_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{op} expects a rank-{rank} tensor, got shape {x.shape}")


# --- convolution -------------------------------------------------------------------------------


def conv_geometry(size: int, kernel: int, stride: int, dilation: int, padding: str, axis: str = "height") -> Tuple[int, int, int]:
    """Return ``(output_size, pad_before, pad_after)`` for one spatial axis."""
    if stride < 1 or dilation < 1:
        raise ConfigurationError(f"stride and dilation must be >= 1, got stride={stride} dilation={dilation}")
    extent = dilation * (kernel - 1) + 1
    if padding == "same":
        total = extent - 1
    elif padding == "valid":
        total = 0
    else:
        raise ConfigurationError(f"padding must be 'same' or 'valid', got {padding!r}")
    before = total // 2
    after = total - before
    if size + total < extent:
        raise ConfigurationError(
            f"{axis}: input {size} with padding {total} is smaller than the effective kernel extent {extent}"
        )
    return (size + total - extent) // stride + 1, before, after


def _tap(padded: np.ndarray, row: int, col: int, out_h: int, out_w: int, stride: int) -> np.ndarray:
    return padded[:, row:row + stride * (out_h - 1) + 1:stride, col:col + stride * (out_w - 1) + 1:stride, :]


def conv2d(x: Tensor, kernel: Variable, bias: Optional[Variable] = None, stride: int = 1,
           dilation: int = 1, padding: str = "same") -> Tensor:
    """2-D (optionally dilated and strided) convolution, kernel laid out ``(kh, kw, c_in, c_out)``.

    Computed as a sum of ``kh * kw`` shifted-slice matrix products so no full im2col
    buffer is materialised.
    """
    _require_rank(x, 4, "conv2d")
    kh, kw, c_in, c_out = kernel.shape
    if x.shape[3] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[3]} channels, kernel expects {c_in}")
    batch, height, width, _ = x.shape
    out_h, top, bottom = conv_geometry(height, kh, stride, dilation, padding, "height")
    out_w, left, right = conv_geometry(width, kw, stride, dilation, padding, "width")
    if top or bottom or left or right:
        padded = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    else:
        padded = x.data
    weights = kernel.data

    def forward_chunk(lo: int, hi: int) -> np.ndarray:
        part = padded[lo:hi]
        acc = None
        for i in range(kh):
            for j in range(kw):
                term = _tap(part, i * dilation, j * dilation, out_h, out_w, stride) @ weights[i, j]
                if acc is None:
                    acc = term
                else:
                    acc += term
        return acc

    out = np.concatenate(_map_batches(forward_chunk, batch), axis=0)
    if bias is not None:
        out += bias.data

    def grad_fn(grad: np.ndarray):
        need_x = x.requires_grad
        need_w = kernel.requires_grad

        def backward_chunk(lo: int, hi: int):
            part = padded[lo:hi]
            g = grad[lo:hi]
            dpad = np.zeros_like(part) if need_x else None
            dker = np.zeros_like(weights) if need_w else None
            g2 = g.reshape(-1, c_out)
            for i in range(kh):
                for j in range(kw):
                    r, c = i * dilation, j * dilation
                    if need_x:
                        _tap(dpad, r, c, out_h, out_w, stride)[...] += g @ weights[i, j].T
                    if need_w:
                        dker[i, j] = _tap(part, r, c, out_h, out_w, stride).reshape(-1, c_in).T @ g2
            return dpad, dker

        parts = _map_batches(backward_chunk, batch)
        dx = dw = None
        if need_x:
            dpad = np.concatenate([p[0] for p in parts], axis=0)
            dx = dpad[:, top:top + height, left:left + width, :]
        if need_w:
            dw = parts[0][1]
            for p in parts[1:]:
                dw = dw + p[1]
        db = grad.sum(axis=(0, 1, 2)) if bias is not None and bias.requires_grad else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor.from_op(out, "conv2d", inputs, grad_fn)


# --- pooling -----------------------------------------------------------------------------------


def max_pool2d(x: Tensor, size: int, stride: int) -> Tensor:
    """Unpadded max pooling; the gradient goes to the first maximum of each window."""
    _require_rank(x, 4, "max_pool2d")
    if size < 1 or stride < 1:
        raise ConfigurationError(f"pool size and stride must be >= 1, got size={size} stride={stride}")
    batch, height, width, channels = x.shape
    if size > height or size > width:
        raise ConfigurationError(f"pool window {size} larger than input {height}x{width}")
    out_h = (height - size) // stride + 1
    out_w = (width - size) // stride + 1
    windows = sliding_window_view(x.data, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    flat = windows.reshape(batch, out_h, out_w, channels, size * size)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def grad_fn(grad: np.ndarray):
        di, dj = np.divmod(argmax, size)
        rows = np.arange(out_h)[None, :, None, None] * stride + di
        cols = np.arange(out_w)[None, None, :, None] * stride + dj
        n_idx = np.arange(batch)[:, None, None, None]
        c_idx = np.arange(channels)[None, None, None, :]
        dx = np.zeros_like(x.data)
        np.add.at(dx, (n_idx, rows, cols, c_idx), grad)
        return (dx,)

    return Tensor.from_op(out, "max_pool2d", (x,), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel; ``(N, H, W, C) -> (N, C)``."""
    _require_rank(x, 4, "global_avg_pool")
    _, height, width, _ = x.shape
    if height < 1 or width < 1:
        raise ShapeError(f"global_avg_pool needs a non-empty map, got {x.shape}")
    out = x.data.mean(axis=(1, 2))

    def grad_fn(grad: np.ndarray):
        spread = grad[:, None, None, :] / (height * width)
        return (np.broadcast_to(spread, x.shape).copy(),)

    return Tensor.from_op(out, "global_avg_pool", (x,), grad_fn)


# --- normalisation -----------------------------------------------------------------------------


@dataclass
class RunningStats:
    """Exponential moving averages kept by a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    updates: int = 0
    warned: bool = False

    @classmethod
    def initial(cls, channels: int, dtype=None) -> "RunningStats":
        dtype = dtype if dtype is not None else get_default_dtype()
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Variable, beta: Variable, stats: RunningStats, mode: str = "train",
               momentum: float = 0.99, epsilon: float = 1e-3) -> Tensor:
    """Per-channel batch normalisation over every axis but the last."""
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch_norm: gamma/beta must have length {channels}")
    axes = tuple(range(x.ndim - 1))
    training = mode == "train"
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean *= momentum
        stats.mean += (1.0 - momentum) * mean
        stats.var *= momentum
        stats.var += (1.0 - momentum) * var
        stats.updates += 1
    else:
        if stats.updates == 0 and not stats.warned:
            logger.warning("batch_norm evaluated before any training step; using initial statistics (mean 0, var 1)")
            stats.warned = True
        mean, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + epsilon)
    x_hat = (x.data - mean) * inv_std
    out = gamma.data * x_hat + beta.data

    def grad_fn(grad: np.ndarray):
        d_gamma = (grad * x_hat).sum(axis=axes)
        d_beta = grad.sum(axis=axes)
        if training:
            count = x.data.size // channels
            dx = (gamma.data * inv_std / count) * (count * grad - d_beta - x_hat * d_gamma)
        else:
            dx = grad * (gamma.data * inv_std)
        return dx, d_gamma, d_beta

    return Tensor.from_op(out, "batch_norm", (x, gamma, beta), grad_fn)


# --- activations -------------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def grad_fn(grad: np.ndarray):
        return (grad * (x.data > 0),)

    return Tensor.from_op(out, "relu", (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow and kept strictly inside (0, 1)."""
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    eps = np.finfo(out.dtype).eps
    out = np.clip(out, eps, 1.0 - eps)

    def grad_fn(grad: np.ndarray):
        return (grad * out * (1.0 - out),)

    return Tensor.from_op(out, "sigmoid", (x,), grad_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis of a ``(N, C)`` tensor."""
    _require_rank(x, 2, "softmax")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(grad: np.ndarray):
        return (out * (grad - (grad * out).sum(axis=1, keepdims=True)),)

    return Tensor.from_op(out, "softmax", (x,), grad_fn)


# --- resampling --------------------------------------------------------------------------------


def interpolation_matrix(size: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Row ``i`` holds the bilinear weights of output sample ``i`` (half-pixel centres, edge clamped)."""
    out_size = size * factor
    source = np.clip((np.arange(out_size) + 0.5) / factor - 0.5, 0, size - 1)
    lower = np.floor(source).astype(int)
    upper = np.minimum(lower + 1, size - 1)
    frac = source - lower
    weights = np.zeros((out_size, size), dtype=dtype)
    rows = np.arange(out_size)
    np.add.at(weights, (rows, lower), 1.0 - frac)
    np.add.at(weights, (rows, upper), frac)
    return weights


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    _require_rank(x, 4, "bilinear_upsample")
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    _, height, width, _ = x.shape
    rows = interpolation_matrix(height, factor, x.dtype)
    cols = interpolation_matrix(width, factor, x.dtype)
    out = np.einsum("ph,nhwc,qw->npqc", rows, x.data, cols, optimize=True)

    def grad_fn(grad: np.ndarray):
        return (np.einsum("ph,npqc,qw->nhwc", rows, grad, cols, optimize=True),)

    return Tensor.from_op(out, "bilinear_upsample", (x,), grad_fn)


# --- dense, dropout, structure -----------------------------------------------------------------


def dense(x: Tensor, weight: Variable, bias: Variable) -> Tensor:
    """``y = x W + b`` on ``(N, D_in)`` inputs."""
    _require_rank(x, 2, "dense")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[1]} does not match weight rows {weight.shape[0]}")
    out = x.data @ weight.data + bias.data

    def grad_fn(grad: np.ndarray):
        dx = grad @ weight.data.T if x.requires_grad else None
        dw = x.data.T @ grad if weight.requires_grad else None
        db = grad.sum(axis=0) if bias.requires_grad else None
        return dx, dw, db

    return Tensor.from_op(out, "dense", (x, weight, bias), grad_fn)


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity (the same object) in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode != "train" or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * (1.0 / (1.0 - rate))
    out = x.data * keep

    def grad_fn(grad: np.ndarray):
        return (grad * keep,)

    return Tensor.from_op(out, "dropout", (x,), grad_fn)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat_channels needs at least one tensor")
    if len(inputs) == 1:
        return inputs[0]
    lead = inputs[0].shape[:-1]
    for t in inputs[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_channels: leading shape {t.shape[:-1]} differs from {lead}")
    widths = [t.shape[-1] for t in inputs]
    out = np.concatenate([t.data for t in inputs], axis=-1)
    offsets = np.cumsum([0] + widths)

    def grad_fn(grad: np.ndarray):
        return tuple(grad[..., lo:hi] for lo, hi in zip(offsets[:-1], offsets[1:]))

    return Tensor.from_op(out, "concat_channels", tuple(inputs), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def grad_fn(grad: np.ndarray):
        return grad, grad

    return Tensor.from_op(out, "add", (a, b), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def grad_fn(grad: np.ndarray):
        return (np.full(x.shape, grad, dtype=x.dtype),)

    return Tensor.from_op(out, "sum", (x,), grad_fn)


def mean_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def grad_fn(grad: np.ndarray):
        return (np.full(x.shape, grad / x.size, dtype=x.dtype),)

    return Tensor.from_op(out, "mean", (x,), grad_fn)
