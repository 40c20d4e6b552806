"""One-parameter constant model ``f_theta = theta`` on ``[-1, 1]``.

Everything here is evaluated on a uniform grid, so the normalising constants
of the Gibbs posterior and its stochastic surrogates are available and
KL divergences can be measured directly. Log-densities are shifted by their
maximum before exponentiation; integrals use composite Simpson on the grid.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.integrate import simpson

from .risk import psi, psi_bar

__all__ = [
    "ConstantModel",
    "DensityGrid",
    "KLBounds",
    "bar_density",
    "bin_masses",
    "density_rows",
    "gibbs_density",
    "kl_numeric",
    "kl_bounds",
    "make_grid",
    "sweep",
    "sweep_cell",
    "tilde_density",
    "toy_data",
    "varpi_density",
    "write_density_csv",
]

DEFAULT_GRID_SIZE = 4001


class ConstantModel:
    """``f_theta(x) = theta`` with the uniform prior on ``[-bound, bound]``."""

    n_params = 1

    def __init__(self, bound: float = 1.0):
        self.bound = bound

    def predict(self, theta, X):
        return np.full(np.shape(X)[0], float(np.asarray(theta).reshape(-1)[0]))

    def losses(self, theta, X, y):
        resid = np.asarray(y, dtype=np.float64) - float(np.asarray(theta).reshape(-1)[0])
        return resid * resid

    def losses_and_grad(self, theta, X, y, scale: float = 1.0):
        resid = np.asarray(y, dtype=np.float64) - float(np.asarray(theta).reshape(-1)[0])
        return resid * resid, np.array([-2.0 * scale * resid.sum()])

    def in_support(self, theta) -> bool:
        return bool(abs(float(np.asarray(theta).reshape(-1)[0])) <= self.bound)


def make_grid(G: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    if G < 3 or G % 2 == 0:
        raise ValueError("grid size must be odd and >= 3")
    return np.linspace(-1.0, 1.0, G)


def _integrate(values, grid):
    return float(simpson(values, x=grid))


@dataclass(frozen=True)
class DensityGrid:
    """Normalised density on a uniform grid, kept alongside its logarithm."""

    grid: np.ndarray
    values: np.ndarray
    log_values: np.ndarray
    normalized: bool = True

    @classmethod
    def from_log(cls, grid, log_unnorm) -> "DensityGrid":
        log_unnorm = np.asarray(log_unnorm, dtype=np.float64)
        if not np.all(np.isfinite(log_unnorm)):
            raise FloatingPointError("non-finite log-density on the grid")
        shift = log_unnorm.max()
        mass = _integrate(np.exp(log_unnorm - shift), grid)
        log_values = log_unnorm - shift - math.log(mass)
        dens = cls(np.asarray(grid), np.exp(log_values), log_values)
        total = dens.integral()
        if abs(total - 1.0) > 1e-10:
            raise FloatingPointError(f"density integrates to {total!r}")
        return dens

    def integral(self) -> float:
        return _integrate(self.values, self.grid)


def toy_data(n: int = 10, seed: int = 0, variance: float = 0.5) -> np.ndarray:
    """Responses ``Y_i ~ N(0, variance)``; the true function is ``f = 0``."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x70D1])))
    return rng.normal(0.0, math.sqrt(variance), size=n)


def _ys(data):
    ys = getattr(data, "ys", data)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if ys.size == 0:
        raise ValueError("empty data")
    return ys


def _loss_matrix(ys, grid):
    return (ys[None, :] - grid[:, None]) ** 2


def gibbs_density(data, lam: float, grid) -> DensityGrid:
    """``exp(-lambda R_n(theta))`` under the uniform prior."""
    ys = _ys(data)
    losses = _loss_matrix(ys, grid)
    return DensityGrid.from_log(grid, -lam * losses.mean(axis=1))


def bar_density(data, lam: float, rho: float, grid) -> DensityGrid:
    """Stationary law of the uncorrected stochastic chain."""
    ys = _ys(data)
    n = ys.size
    losses = _loss_matrix(ys, grid)
    return DensityGrid.from_log(grid, -psi_bar(rho, lam * losses / n).sum(axis=1))


def tilde_density(data, lam: float, rho: float, grid) -> DensityGrid:
    """Stationary law of the corrected chain with ``zeta = 1``."""
    ys = _ys(data)
    n = ys.size
    losses = _loss_matrix(ys, grid)
    return DensityGrid.from_log(grid, -psi(rho, lam * losses / n).sum(axis=1))


def varpi_density(data, lam: float, rho: float, grid) -> DensityGrid:
    """``exp(rho sum_i exp(-lambda loss_i / (n rho)))``, the small-batch limit of the surrogate."""
    if not 0.0 < rho < 1.0:
        raise ValueError("varpi is defined for rho in (0, 1)")
    ys = _ys(data)
    n = ys.size
    losses = _loss_matrix(ys, grid)
    return DensityGrid.from_log(grid, rho * np.exp(-lam * losses / (n * rho)).sum(axis=1))


def kl_numeric(p: DensityGrid, q: DensityGrid) -> float:
    """``int p log(p / q)`` by quadrature on the shared grid."""
    if p.grid.shape != q.grid.shape or not np.array_equal(p.grid, q.grid):
        raise ValueError("densities live on different grids")
    integrand = np.where(p.values > 0, p.values * (p.log_values - q.log_values), 0.0)
    return _integrate(integrand, p.grid)


def bin_masses(density: DensityGrid, n_bins: int) -> np.ndarray:
    """Probability of each of ``n_bins`` equal-width bins covering the grid."""
    intervals = density.grid.size - 1
    if intervals % (2 * n_bins):
        raise ValueError(f"{intervals} grid intervals cannot be split into {n_bins} Simpson bins")
    per = intervals // n_bins
    return np.array(
        [
            _integrate(density.values[k * per : (k + 1) * per + 1], density.grid[k * per : (k + 1) * per + 1])
            for k in range(n_bins)
        ]
    )


class KLBounds(NamedTuple):
    """Right-hand sides of the three KL bounds, on the absolute KL scale."""

    bar_gibbs: float
    bar_varpi: float
    tilde_gibbs: float


def kl_bounds(data, lam: float, rho: float, C: float = 1.0) -> KLBounds:
    """Absolute-KL bounds, with noise ``eps_i = Y_i`` (true function zero).

    * ``KL(bar | gibbs_lam) <= n rho (lam/(n rho))^2 (64 C^4 + (4/n) sum eps^4)``
    * ``KL(bar | varpi) <= n rho * rho / (1 - rho)`` (infinite at ``rho = 1``)
    * ``KL(tilde | gibbs_{lam/(2-rho)}) <= n (lam/n)^2 (32 C^4 + (2/n) sum eps^4)``
    """
    eps = _ys(data)
    n = eps.size
    m4 = float(np.sum(eps**4)) / n
    b1a = n * rho * (lam / (n * rho)) ** 2 * (64.0 * C**4 + 4.0 * m4)
    b1b = math.inf if rho >= 1.0 else n * rho * rho / (1.0 - rho)
    b2 = n * (lam / n) ** 2 * (32.0 * C**4 + 2.0 * m4)
    return KLBounds(b1a, b1b, b2)


def sweep_cell(ys, lam: float, rho: float, grid) -> dict:
    """Measured KLs and bounds for one ``(lambda, rho)`` pair."""
    gibbs = gibbs_density(ys, lam, grid)
    bar = bar_density(ys, lam, rho, grid)
    tilde = tilde_density(ys, lam, rho, grid)
    reduced = gibbs_density(ys, lam / (2.0 - rho), grid)
    bounds = kl_bounds(ys, lam, rho)
    kl_varpi = None
    if rho < 1.0:
        kl_varpi = kl_numeric(bar, varpi_density(ys, lam, rho, grid))
    row = {
        "lambda": float(lam),
        "rho": float(rho),
        "kl_bar_gibbs": kl_numeric(bar, gibbs),
        "bound1a": bounds.bar_gibbs,
        "kl_bar_varpi": kl_varpi,
        "bound1b": None if math.isinf(bounds.bar_varpi) else bounds.bar_varpi,
        "kl_tilde_gibbs_reduced": kl_numeric(tilde, reduced),
        "bound2": bounds.tilde_gibbs,
    }
    row["ok"] = _cell_ok(row)
    return row


# quadrature noise allowance when a bound is exactly zero (lambda = 0)
_KL_ATOL = 1e-12


def _cell_ok(row) -> bool:
    ok = row["kl_bar_gibbs"] <= row["bound1a"] + _KL_ATOL
    ok &= row["kl_tilde_gibbs_reduced"] <= row["bound2"] + _KL_ATOL
    if row["kl_bar_varpi"] is not None:
        ok &= row["kl_bar_varpi"] <= row["bound1b"] + _KL_ATOL
    return bool(ok)


def sweep(
    n: int = 10,
    lam_factors=(0.25, 0.5, 1.0),
    rhos=(0.1, 0.5, 0.9),
    seeds=range(20),
    G: int = DEFAULT_GRID_SIZE,
) -> list[dict]:
    """Evaluate every ``(seed, lambda = factor * n, rho)`` cell."""
    grid = make_grid(G)
    rows = []
    for seed in seeds:
        ys = toy_data(n, seed)
        for factor in lam_factors:
            for rho in rhos:
                row = sweep_cell(ys, factor * n, rho, grid)
                row["seed"] = int(seed)
                rows.append(row)
    return rows


def density_rows(ys, lam: float, rho: float, grid) -> list[tuple[float, ...]]:
    """Rows ``(theta, gibbs, bar, varpi, tilde)`` for one parameter combination."""
    cols = [
        gibbs_density(ys, lam, grid).values,
        bar_density(ys, lam, rho, grid).values,
        varpi_density(ys, lam, rho, grid).values,
        tilde_density(ys, lam, rho, grid).values,
    ]
    return [tuple(float(v) for v in row) for row in zip(grid, *cols)]


def write_density_csv(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("theta", "gibbs", "bar", "varpi", "tilde"))
        for row in rows:
            w.writerow([repr(v) for v in row])
    return path
