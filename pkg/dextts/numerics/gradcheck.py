"""
Central finite-difference gradient checks.
"""
import logging
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from dextts.errors import ContractError, NumericError
from dextts.numerics.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, seed: int = 0) -> float:
    """
    Compare the analytic gradient of `f` at `x` with central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output coordinate contributes.

    Args:
        f: Deterministic tensor function
        x: Point to check at (array-like or Tensor)
        h: Difference step
        seed: Seed of the output projection

    Returns:
        max over coordinates of |analytic − numeric| / max(1, |numeric|)

    Raises:
        ContractError: If h is not positive
        NumericError: If any evaluation is non-finite
    """
    if h <= 0:
        raise ContractError(f"grad_check step must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    with no_grad():
        sample_out = f(Tensor(base))
    weights = np.random.default_rng(seed).normal(size=sample_out.shape) if sample_out.size > 1 else np.ones(sample_out.shape)

    def objective(values: np.ndarray) -> float:
        with no_grad():
            value = float((f(Tensor(values)) * Tensor(weights)).sum().data)
        if not np.isfinite(value):
            raise NumericError("Non-finite objective in grad_check", where="grad_check")
        return value

    leaf = Tensor(base, requires_grad=True)
    loss = (f(leaf) * Tensor(weights)).sum()
    analytic = np.zeros_like(base)
    if loss.requires_grad:
        loss.backward()
        if leaf.grad is not None:
            analytic = leaf.grad

    numeric = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        shifted = base.copy()
        shifted[index] += h
        plus = objective(shifted)
        shifted[index] -= 2 * h
        minus = objective(shifted)
        numeric[index] = (plus - minus) / (2 * h)
    return _relative_error(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tuple[str, Tensor]], h: float = 1e-5,
                      max_coords: Optional[int] = 3, seed: int = 0) -> Dict[str, float]:
    """
    Finite-difference check of d(loss)/d(param) for a set of named parameters.

    `loss_fn` rebuilds the loss from the current parameter values and must be
    deterministic. At most `max_coords` randomly chosen coordinates are
    perturbed per parameter (all of them when None).

    Returns:
        Map from parameter name to its max relative error
    """
    params = list(params)
    for _, tensor in params:
        tensor.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params}

    rng = np.random.default_rng(seed)
    errors = {}
    for name, tensor in params:
        flat_count = tensor.size
        if max_coords is None or max_coords >= flat_count:
            coords = np.arange(flat_count)
        else:
            coords = rng.choice(flat_count, size=max_coords, replace=False)
        worst = 0.0
        for flat in coords:
            index = np.unravel_index(flat, tensor.shape)
            original = tensor.data[index]
            with no_grad():
                tensor.data[index] = original + h
                plus = float(loss_fn().data)
                tensor.data[index] = original - h
                minus = float(loss_fn().data)
                tensor.data[index] = original
            numeric = (plus - minus) / (2 * h)
            worst = max(worst, _relative_error(np.array(analytic[name][index]), np.array(numeric)))
        errors[name] = worst
    logger.debug(f"grad_check_params worst error {max(errors.values(), default=0.0):.3e}")
    return errors
