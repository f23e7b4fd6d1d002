"""Shared adaptive-moment gradient descent used by key and watermark training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericError

# Datasets up to this size are used as one full batch per step.
FULL_BATCH_LIMIT = 4096
DEFAULT_BATCH_SIZE = 256


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-2
    max_iters: int = 2000
    # "adam" scales steps per coordinate; "momentum" is heavy-ball SGD, which
    # preserves the gradient's direction. Key generation uses adam; watermark
    # training defaults to momentum because per-coordinate rescaling turns
    # key-aligned gradients into sign-shaped updates whose misaligned mass
    # leaks into other users' classifiers.
    algorithm: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    early_stop_window: int = 50
    early_stop_tol: float = 1e-6
    # Early stopping tracks an exponentially smoothed loss so stochastic
    # objectives (minibatches, sampled attacks) are not stopped by one lucky
    # draw; deterministic objectives behave as with the raw loss.
    loss_smoothing: float = 0.05
    batch_size: int | None = None  # None: full batch up to FULL_BATCH_LIMIT clips

    def resolve_batch_size(self, n_rows: int) -> int:
        if self.batch_size is not None:
            return min(self.batch_size, n_rows)
        if n_rows <= FULL_BATCH_LIMIT:
            return n_rows
        return DEFAULT_BATCH_SIZE


class Adam:
    """Per-parameter adaptive-moment state for one flat parameter vector."""

    def __init__(self, dim: int, config: OptimizerConfig):
        self.config = config
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Return the update to add to the parameters for this gradient."""
        c = self.config
        self.t += 1
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * grad * grad
        m_hat = self.m / (1.0 - c.beta1**self.t)
        v_hat = self.v / (1.0 - c.beta2**self.t)
        return -c.learning_rate * m_hat / (np.sqrt(v_hat) + c.epsilon)


class Momentum:
    """Heavy-ball SGD state for one flat parameter vector."""

    def __init__(self, dim: int, config: OptimizerConfig):
        self.config = config
        self.velocity = np.zeros(dim)

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.velocity = self.config.momentum * self.velocity + grad
        return -self.config.learning_rate * self.velocity


def make_optimizer(dim: int, config: OptimizerConfig):
    if config.algorithm == "adam":
        return Adam(dim, config)
    if config.algorithm == "momentum":
        return Momentum(dim, config)
    raise NumericError(f"unknown optimizer algorithm {config.algorithm!r}")


def minimize(
    init: np.ndarray,
    loss_and_grad: Callable[[np.ndarray, int], tuple[float, np.ndarray]],
    config: OptimizerConfig,
    postprocess: Callable[[np.ndarray], np.ndarray] | None = None,
    on_iteration: Callable[[int, float, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, float, int]:
    """Run Adam until max_iters or until loss stops improving.

    ``loss_and_grad(params, iteration)`` returns the batch loss and gradient;
    ``postprocess`` (e.g. renormalization) is applied after every step.
    Stops early once the best loss has not improved by at least
    ``early_stop_tol`` over ``early_stop_window`` consecutive iterations.

    Returns (params, last_loss, iterations_run).
    """

    params = np.array(init, dtype=np.float64, copy=True)
    optimizer = make_optimizer(params.shape[0], config)
    best = np.inf
    since_improvement = 0
    loss = np.inf
    smoothed: float | None = None
    iters = 0
    for it in range(config.max_iters):
        loss, grad = loss_and_grad(params, it)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite loss or gradient at iteration {it}")
        if on_iteration is not None:
            on_iteration(it, loss, params)
        params += optimizer.step(grad)
        if postprocess is not None:
            params = postprocess(params)
        iters = it + 1
        smoothed = loss if smoothed is None else (
            (1.0 - config.loss_smoothing) * smoothed + config.loss_smoothing * loss
        )
        if smoothed < best - config.early_stop_tol:
            best = smoothed
            since_improvement = 0
        else:
            since_improvement += 1
            if since_improvement >= config.early_stop_window:
                break
    return params, float(loss), iters
