"""Differentially private synthetic data twins.

Learn a probabilistic generative model of a sensitive tabular dataset under
(epsilon, delta)-DP, release a synthetic twin sampled from the posterior
predictive distribution, and evaluate whether statistical discoveries made on
the original data are reproduced on the twin.
"""

from .accountant import Accountant, MechanismRecord, PrivacyBudget
from .dpvi import DpviConfig, TrainedModel, VariationalPosterior, fit, fit_stratified
from .mixture import MixtureLayout, MixtureParams, build_stratified
from .privbayes import BayesNetwork, PrivBayesConfig, fit_network, sample_network
from .schema import Dataset, FeatureSpec, Schema, discretize, load_csv, load_schema, split_strata
from .synthesize import SynthesisPlan, sample_ppd
from .evaluate import (
    DiscoveryVerdict,
    RegressionReport,
    RegressionSpec,
    discovery_verdict,
    frobenius_error,
    logistic_regression,
    poisson_regression,
)

__version__ = "0.1.0"

__all__ = [
    "Accountant",
    "BayesNetwork",
    "Dataset",
    "DiscoveryVerdict",
    "DpviConfig",
    "FeatureSpec",
    "MechanismRecord",
    "MixtureLayout",
    "MixtureParams",
    "PrivBayesConfig",
    "PrivacyBudget",
    "RegressionReport",
    "RegressionSpec",
    "Schema",
    "SynthesisPlan",
    "TrainedModel",
    "VariationalPosterior",
    "build_stratified",
    "discovery_verdict",
    "discretize",
    "fit",
    "fit_network",
    "fit_stratified",
    "frobenius_error",
    "load_csv",
    "load_schema",
    "logistic_regression",
    "poisson_regression",
    "sample_network",
    "sample_ppd",
    "split_strata",
]
