"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from splitvfl.errors import ConfigError, NonFiniteError
from splitvfl.nn.layers import Layer, Stack
from splitvfl.nn.loss import softmax_cross_entropy
from splitvfl.nn.params import ParameterStore

MAX_CHECKED_ELEMENTS = 10_000


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


def numeric_gradient(loss_fn: Callable[[], float], array: np.ndarray, eps: float) -> np.ndarray:
    """Perturb ``array`` in place element by element and difference ``loss_fn``."""
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn()
        flat[i] = orig - eps
        down = loss_fn()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"non-finite loss while perturbing element {i}")
        out[i] = (up - down) / (2 * eps)
    return grad


def max_relative_error(pairs) -> float:
    worst = 0.0
    for analytic, numeric in pairs:
        if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
            raise NonFiniteError("non-finite gradient encountered")
        if analytic.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst


def grad_check(layers: Sequence[Layer], params: ParameterStore, x: np.ndarray, labels,
               eps: float = 1e-3, include_input: bool = False, dtype=np.float64) -> float:
    """Worst relative error between backprop and finite differences.

    The loss is softmax cross-entropy on the chain's output.  The check runs
    on copies cast to ``dtype``; float64 keeps the finite-difference noise far
    below the tolerance so the comparison tests the backward formulas rather
    than float32 rounding.
    """
    n_checked = params.num_elements() + (x.size if include_input else 0)
    if n_checked > MAX_CHECKED_ELEMENTS:
        raise ConfigError(f"{n_checked} elements exceeds the grad-check limit of {MAX_CHECKED_ELEMENTS}")
    stack = Stack(layers, x.shape[1:])
    store = params.copy(dtype=dtype)
    store.zero_grad()
    x = np.array(x, dtype=dtype)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite input")

    out, caches = stack.forward(store, x)
    _, g = softmax_cross_entropy(out, labels)
    gx = stack.backward(store, caches, g)

    def loss() -> float:
        return softmax_cross_entropy(stack.forward(store, x)[0], labels)[0]

    pairs = [(p.grad.copy(), numeric_gradient(loss, p.value, eps)) for p in store]
    if include_input:
        pairs.append((gx, numeric_gradient(loss, x, eps)))
    return max_relative_error(pairs)
