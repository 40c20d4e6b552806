"""Corrected stochastic MALA for Gibbs posteriors over ReLU regression networks."""
from .data import Dataset, generate, true_f
from .estimator import MALARegressor
from .mlp import MLP, Architecture, UnsupportedConfigurationError
from .posterior import CredibleReport, SampleSet, coverage, credible_radius, posterior_mean_predict, validation_risk
from .risk import Mask, RiskParams, corrected_risk, empirical_risk, stochastic_risk
from .sampler import ALGORITHMS, ChainConfig, ChainResult, run_chain, preset_config
from .training import pretrain

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "Architecture",
    "ChainConfig",
    "ChainResult",
    "CredibleReport",
    "Dataset",
    "MALARegressor",
    "MLP",
    "Mask",
    "RiskParams",
    "SampleSet",
    "UnsupportedConfigurationError",
    "corrected_risk",
    "coverage",
    "credible_radius",
    "empirical_risk",
    "generate",
    "posterior_mean_predict",
    "pretrain",
    "run_chain",
    "stochastic_risk",
    "preset_config",
    "true_f",
    "validation_risk",
]
