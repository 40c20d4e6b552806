"""Gradient-based pre-training used to initialise the chains."""
from __future__ import annotations

import math

import numpy as np

from .sampler import draw_mask

__all__ = ["DivergenceError", "pretrain"]


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


def pretrain(
    model,
    data,
    theta0,
    *,
    steps: int = 2000,
    lr: float = 1e-3,
    optimizer: str = "sgd",
    rho: float = 1.0,
    seed: int = 0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    trace: list | None = None,
) -> np.ndarray:
    """Minimise the empirical risk with Bernoulli(``rho``) batches.

    The batch gradient is scaled by ``1/(n rho)`` so it is unbiased for the
    full-sample gradient. ``trace``, if given, receives the batch risk of
    every step.
    """
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    theta = np.array(theta0, dtype=np.float64)
    if steps <= 0 or lr == 0:
        return theta
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0xADA])))
    n = data.n
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = betas
    for t in range(1, steps + 1):
        mask = draw_mask(n, rho, rng)
        losses, grad = model.losses_and_grad(
            theta, data.xs[mask.bits], data.ys[mask.bits], 1.0 / (n * rho)
        )
        batch_risk = float(losses.sum()) / (n * rho)
        if not (math.isfinite(batch_risk) and np.all(np.isfinite(grad))):
            raise DivergenceError(f"non-finite loss or gradient at pre-training step {t}")
        if trace is not None:
            trace.append(batch_risk)
        if optimizer == "sgd":
            theta -= lr * grad
        else:
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta
