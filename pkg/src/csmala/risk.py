"""Risk functionals entering the acceptance step and the surrogate densities.

Every function that takes ``(model, theta, data)`` has a ``*_from_losses``
counterpart operating on a precomputed loss array (last axis = samples), which
the grid code uses to evaluate thousands of parameters at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Mask",
    "RiskParams",
    "bar_risk_from_losses",
    "corrected_risk",
    "corrected_risk_from_losses",
    "empirical_risk",
    "psi",
    "psi_bar",
    "stochastic_risk",
    "surrogate_risk_bar",
    "surrogate_risk_tilde",
    "tilde_risk_from_losses",
]


@dataclass(frozen=True)
class Mask:
    """Bernoulli inclusion indicators ``z`` with their cached sum ``|Z|``."""

    bits: np.ndarray
    count: int

    @classmethod
    def from_bits(cls, bits) -> "Mask":
        bits = np.asarray(bits, dtype=bool)
        return cls(bits, int(np.count_nonzero(bits)))

    @classmethod
    def full(cls, n: int) -> "Mask":
        return cls(np.ones(n, dtype=bool), n)

    def __len__(self):
        return self.bits.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.count == other.count and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class RiskParams:
    lam: float
    rho: float = 1.0
    zeta: float = 0.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        _check_rho(self.rho)
        if self.zeta < 0:
            raise ValueError(f"zeta must be >= 0, got {self.zeta}")


def _check_rho(rho):
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")


def _bits(mask, n):
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if bits.shape != (n,):
        raise ValueError(f"mask has shape {bits.shape}, data has n={n}")
    return bits


def _losses(model, theta, data):
    if data.n < 1:
        raise ValueError("empty dataset")
    return model.losses(theta, data.xs, data.ys)


def psi(rho: float, x):
    """``-log(exp(-x) + 1 - rho)``; equals ``x`` when ``rho = 1``."""
    _check_rho(rho)
    log1m = math.log1p(-rho) if rho < 1 else -math.inf
    return -np.logaddexp(-np.asarray(x, dtype=np.float64), log1m)


def psi_bar(rho: float, x):
    """``-log(rho exp(-x / rho) + 1 - rho)``; equals ``x`` when ``rho = 1``."""
    _check_rho(rho)
    log1m = math.log1p(-rho) if rho < 1 else -math.inf
    return -np.logaddexp(math.log(rho) - np.asarray(x, dtype=np.float64) / rho, log1m)


def empirical_risk(model, theta, data) -> float:
    return float(np.mean(_losses(model, theta, data)))


def stochastic_risk(model, theta, data, mask, rho: float) -> float:
    """``(1 / (n rho)) sum_i z_i loss_i``."""
    _check_rho(rho)
    bits = _bits(mask, data.n)
    losses = model.losses(theta, data.xs[bits], data.ys[bits])
    return float(losses.sum() / (data.n * rho))


def corrected_risk_from_losses(loss_sum: float, count: int, n: int, params: RiskParams) -> float:
    """``loss_sum / n + zeta log(rho) / lambda * |Z|`` (note the ``1/n`` scaling)."""
    correction = 0.0
    if params.rho < 1 and params.zeta:
        correction = params.zeta * math.log(params.rho) / params.lam * count
    return loss_sum / n + correction


def corrected_risk(model, theta, data, mask, params: RiskParams) -> float:
    bits = _bits(mask, data.n)
    losses = model.losses(theta, data.xs[bits], data.ys[bits])
    return corrected_risk_from_losses(float(losses.sum()), int(bits.sum()), data.n, params)


def bar_risk_from_losses(losses, lam: float, rho: float):
    """``(1/lambda) sum_i psi_bar(lambda loss_i / n)`` over the last axis."""
    losses = np.asarray(losses, dtype=np.float64)
    n = losses.shape[-1]
    if rho == 1.0:
        return losses.sum(axis=-1) / n
    return psi_bar(rho, lam * losses / n).sum(axis=-1) / lam


def tilde_risk_from_losses(losses, lam: float, rho: float):
    """``(1/lambda) sum_i psi(lambda loss_i / n)`` over the last axis."""
    losses = np.asarray(losses, dtype=np.float64)
    n = losses.shape[-1]
    if rho == 1.0:
        return losses.sum(axis=-1) / n
    return psi(rho, lam * losses / n).sum(axis=-1) / lam


def surrogate_risk_bar(model, theta, data, lam: float, rho: float) -> float:
    """Risk whose Gibbs measure is the stationary law of the uncorrected stochastic chain."""
    _check_rho(rho)
    return float(bar_risk_from_losses(_losses(model, theta, data), lam, rho))


def surrogate_risk_tilde(model, theta, data, lam: float, rho: float) -> float:
    """Risk whose Gibbs measure is the stationary law of the corrected chain with ``zeta = 1``."""
    _check_rho(rho)
    return float(tilde_risk_from_losses(_losses(model, theta, data), lam, rho))
