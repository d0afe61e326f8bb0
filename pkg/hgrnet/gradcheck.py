"""Central finite-difference checks of the recorded gradients."""
import logging
from typing import Callable, Dict, Sequence

import numpy as np

from hgrnet.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


def numerical_gradient(loss_fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5) -> np.ndarray:
    """d(loss)/d(target) by central differences, perturbing ``target.data`` in place."""
    grad = np.zeros_like(target.data, dtype=np.float64)
    flat = target.data.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + step
        with no_grad():
            upper = loss_fn().item()
        flat[index] = original - step
        with no_grad():
            lower = loss_fn().item()
        flat[index] = original
        grad.reshape(-1)[index] = (upper - lower) / (2.0 * step)
    return grad


def analytic_gradients(loss_fn: Callable[[], Tensor], targets: Sequence[Tensor]) -> Dict[int, np.ndarray]:
    for target in targets:
        target.zero_grad()
    backward(loss_fn())
    return {id(t): np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets}


def max_relative_error(loss_fn: Callable[[], Tensor], targets: Sequence[Tensor], step: float = 1e-5) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over every element of every target.

    ``loss_fn`` must be deterministic (reseed any dropout generator inside it).
    """
    analytic = analytic_gradients(loss_fn, targets)
    worst = 0.0
    for target in targets:
        numeric = numerical_gradient(loss_fn, target, step)
        error = np.abs(analytic[id(target)] - numeric) / np.maximum(1.0, np.abs(numeric))
        worst = max(worst, float(error.max()) if error.size else 0.0)
    logger.debug(f"gradient check over {len(targets)} tensors: max relative error {worst:.3e}")
    return worst
