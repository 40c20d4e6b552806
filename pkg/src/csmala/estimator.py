"""scikit-learn style wrapper: pre-train a ReLU network, then sample its Gibbs posterior."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, check_X_y

from .data import Dataset
from .mlp import MLP, Architecture
from .posterior import SampleSet, credible_radius
from .sampler import ALGORITHMS, run_chain, preset_config
from .training import pretrain

__all__ = ["MALARegressor"]


class MALARegressor(RegressorMixin, BaseEstimator):
    """Posterior-mean regressor backed by one MALA, sMALA or csMALA chain.

    Unset hyperparameters (``lam``, ``gamma``, ``step_size``, ``burn_in``,
    ``gap``) fall back to the preset for the chosen algorithm and ``rho``.

    Args:
        algo: One of ``"mala"``, ``"smala"``, ``"csmala"``.
        rho: Bernoulli batch probability.
        hidden_width: Neurons per hidden layer.
        depth: Number of hidden layers.
        n_draws: Retained posterior draws.
        desk_scale: Use the reduced burn-in and gap of the desk preset.
        pretrain_steps: Optimiser steps before sampling; 0 starts from the initialiser.
        pretrain_optimizer: ``"sgd"`` or ``"adam"``.
        random_state: Seed for initialisation, pre-training and the chain.

    Attributes:
        draws_: Retained parameter vectors, shape ``(n_draws, P)``.
        acceptance_rate_: Fraction of accepted proposals over the whole chain.
    """

    def __init__(
        self,
        algo="csmala",
        rho=0.5,
        hidden_width=32,
        depth=2,
        lam=None,
        gamma=None,
        step_size=None,
        burn_in=None,
        gap=None,
        n_draws=20,
        desk_scale=True,
        pretrain_steps=2000,
        pretrain_lr=1e-3,
        pretrain_optimizer="adam",
        random_state=None,
    ):
        self.algo = algo
        self.rho = rho
        self.hidden_width = hidden_width
        self.depth = depth
        self.lam = lam
        self.gamma = gamma
        self.step_size = step_size
        self.burn_in = burn_in
        self.gap = gap
        self.n_draws = n_draws
        self.desk_scale = desk_scale
        self.pretrain_steps = pretrain_steps
        self.pretrain_lr = pretrain_lr
        self.pretrain_optimizer = pretrain_optimizer
        self.random_state = random_state

    def _seed(self) -> int:
        if isinstance(self.random_state, (int, np.integer)):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(2**31))

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if self.algo not in ALGORITHMS:
            raise ValueError(f"algo must be one of {ALGORITHMS}, got {self.algo!r}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        seed = self._seed()
        arch = Architecture(X.shape[1], self.depth, self.hidden_width)
        model = MLP(arch)
        data = Dataset(X, y)
        overrides = {
            k: v
            for k, v in (
                ("lam", self.lam),
                ("gamma", self.gamma),
                ("s", self.step_size),
                ("burn_in", self.burn_in),
                ("gap", self.gap),
            )
            if v is not None
        }
        config = preset_config(
            self.algo, len(y), self.rho, arch.P, desk_scale=self.desk_scale, seed=seed,
            draws=self.n_draws, **overrides,
        )
        theta = model.init_params(np.random.default_rng([seed, 1]))
        theta = pretrain(
            model, data, theta, steps=self.pretrain_steps, lr=self.pretrain_lr,
            optimizer=self.pretrain_optimizer, rho=self.rho, seed=seed,
        )
        result = run_chain(model, config, data, theta)

        self.n_features_in_ = X.shape[1]
        self.architecture_ = arch
        self.chain_config_ = config
        self.draws_ = result.draws
        self.acceptance_rate_ = result.acceptance_rate
        self._samples = SampleSet(result.draws, model, config.fingerprint())
        return self

    def _check_X(self, X):
        check_is_fitted(self, "draws_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted with {self.n_features_in_}")
        return X

    def predict_draws(self, X) -> np.ndarray:
        """Predictions of every retained draw, shape ``(n_draws, n_samples)``."""
        X = self._check_X(X)
        return self._samples.predictions(X)

    def predict(self, X) -> np.ndarray:
        """Posterior mean of the network outputs."""
        return self.predict_draws(X).mean(axis=0)

    def credible_radius(self, X, alpha=0.005) -> float:
        """Radius of the ``1 - alpha`` credible ball around the posterior mean on ``X``."""
        X = self._check_X(X)
        return credible_radius(self._samples, X, alpha).radius
