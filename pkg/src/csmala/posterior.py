"""Posterior summaries from retained draws: predictive mean, credible radius, coverage."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "CredibleReport",
    "SampleSet",
    "coverage",
    "credible_radius",
    "nearest_rank_quantile",
    "posterior_mean_predict",
    "validation_risk",
]


@dataclass
class SampleSet:
    """``N`` retained parameter vectors of one chain together with their model."""

    draws: np.ndarray
    model: object
    fingerprint: str = ""

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=np.float64))
        if self.draws.shape[0] < 1:
            raise ValueError("a sample set needs at least one draw")
        if self.draws.shape[1] != self.model.n_params:
            raise ValueError(
                f"draws have length {self.draws.shape[1]}, model expects {self.model.n_params}"
            )
        if not self.fingerprint:
            self.fingerprint = hashlib.sha256(self.draws.tobytes()).hexdigest()[:16]

    def __len__(self):
        return self.draws.shape[0]

    def predictions(self, X) -> np.ndarray:
        """Array of shape ``(N, len(X))`` with one row per draw."""
        return np.stack([self.model.predict(theta, X) for theta in self.draws])


def posterior_mean_predict(samples: SampleSet, X) -> np.ndarray:
    """Pointwise average of the draws' predictions (not of their parameters)."""
    return samples.predictions(X).mean(axis=0)


def validation_risk(predictions, y) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if predictions.shape != y.shape:
        raise ValueError(f"predictions {predictions.shape} vs responses {y.shape}")
    if y.size == 0:
        raise ValueError("empty validation set")
    return float(np.mean((y - predictions) ** 2))


def nearest_rank_quantile(values, level: float) -> float:
    """Smallest sample value with at least ``ceil(level * N)`` values at or below it."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise ValueError("no values")
    if not 0.0 < level <= 1.0:
        raise ValueError("level must lie in (0, 1]")
    # guard against 0.995 * 20 = 19.900000000000002 style rounding
    rank = math.ceil(round(level * values.size, 9))
    return float(values[max(rank, 1) - 1])


@dataclass
class CredibleReport:
    radius: float
    distances: np.ndarray
    alpha: float
    coverage_hits: int | None = None
    n_chains: int | None = None

    def to_dict(self) -> dict:
        return {
            "radius": self.radius,
            "distances": [float(h) for h in self.distances],
            "alpha": self.alpha,
            "coverage_hits": self.coverage_hits,
            "n_chains": self.n_chains,
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def credible_radius(samples: SampleSet, X_val, alpha: float = 0.005) -> CredibleReport:
    """Radius of the credible ball around the posterior mean.

    ``h_k`` is the mean squared distance between draw ``k`` and the
    posterior mean over the validation inputs; the radius is the
    nearest-rank ``1 - alpha`` quantile of the ``h_k``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    X_val = np.asarray(X_val, dtype=np.float64)
    if X_val.shape[0] == 0:
        raise ValueError("empty validation set")
    preds = samples.predictions(X_val)
    mean = preds.mean(axis=0)
    h = np.mean((preds - mean) ** 2, axis=1)
    return CredibleReport(nearest_rank_quantile(h, 1.0 - alpha), h, alpha)


def coverage(chain_reports, f_true) -> float:
    """Fraction of chains whose posterior mean lies within their own credible radius of ``f``.

    ``chain_reports`` is a sequence of ``(posterior-mean predictions, CredibleReport)``.
    """
    chain_reports = list(chain_reports)
    if not chain_reports:
        raise ValueError("need at least one chain")
    f_true = np.asarray(f_true, dtype=np.float64)
    hits = 0
    for mean_pred, report in chain_reports:
        dist = float(np.mean((np.asarray(mean_pred) - f_true) ** 2))
        hits += dist <= report.radius
    return hits / len(chain_reports)
