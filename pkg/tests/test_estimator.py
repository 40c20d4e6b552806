import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from csmala import MALARegressor
from csmala.data import generate

FAST = dict(hidden_width=4, burn_in=40, gap=5, n_draws=4, pretrain_steps=50, random_state=0)


@pytest.fixture(scope="module")
def data():
    return generate(120, seed=1)


@pytest.fixture(scope="module")
def fitted(data):
    return MALARegressor(**FAST).fit(data.xs, data.ys)


class TestMALARegressor:
    def test_params_round_trip(self):
        est = MALARegressor(algo="smala", rho=0.3)
        assert clone(est).get_params() == est.get_params()
        assert est.set_params(rho=0.7).rho == 0.7

    def test_fitted_attributes(self, fitted):
        assert fitted.draws_.shape == (4, fitted.architecture_.P)
        assert fitted.n_features_in_ == 1
        assert 0.0 <= fitted.acceptance_rate_ <= 1.0
        assert fitted.chain_config_.lam == pytest.approx(120 * 1.5)

    def test_predict_is_mean_of_draws(self, fitted, data):
        np.testing.assert_allclose(fitted.predict(data.xs), fitted.predict_draws(data.xs).mean(axis=0))

    def test_credible_radius(self, fitted, data):
        draws = fitted.predict_draws(data.xs)
        h = ((draws - draws.mean(axis=0)) ** 2).mean(axis=1)
        assert fitted.credible_radius(data.xs) == pytest.approx(h.max())

    def test_deterministic(self, fitted, data):
        again = MALARegressor(**FAST).fit(data.xs, data.ys)
        assert again.draws_.tobytes() == fitted.draws_.tobytes()

    def test_score_is_r2(self, fitted, data):
        assert fitted.score(data.xs, data.ys) <= 1.0

    def test_not_fitted(self, data):
        with pytest.raises(NotFittedError):
            MALARegressor().predict(data.xs)

    def test_feature_mismatch(self, fitted):
        with pytest.raises(ValueError):
            fitted.predict(np.zeros((3, 2)))

    @pytest.mark.parametrize("kw", [dict(algo="sgld"), dict(rho=0.0), dict(rho=1.2)])
    def test_invalid_hyperparameters(self, data, kw):
        with pytest.raises(ValueError):
            MALARegressor(**dict(FAST, **kw)).fit(data.xs, data.ys)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            MALARegressor(**FAST).fit(np.zeros((3, 1)), np.zeros(4))
        with pytest.raises(ValueError):
            MALARegressor(**FAST).fit([[np.nan]] * 3, [0.0] * 3)
