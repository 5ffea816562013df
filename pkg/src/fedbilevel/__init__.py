"""Federated stochastic bilevel optimization: LocalBSGM and LocalBSGVRM."""

from .algorithms import Algorithm, HyperParams, Variant, theorem_hyperparams
from .federation import FederationConfig, RunTrace, accounting, convergence_metric, run
from .hypergrad import NeumannConfig, derived_constants, stochastic_hypergradient
from .numerics import RandomStream, finite_diff_grad, gaussian_vec
from .problems import BilevelOracle, QuadQuad, RidgeHyper, SmoothnessConstants, load_ridge_csv

__all__ = [
    "Algorithm",
    "BilevelOracle",
    "FederationConfig",
    "HyperParams",
    "NeumannConfig",
    "QuadQuad",
    "RandomStream",
    "RidgeHyper",
    "RunTrace",
    "SmoothnessConstants",
    "Variant",
    "accounting",
    "convergence_metric",
    "derived_constants",
    "finite_diff_grad",
    "gaussian_vec",
    "load_ridge_csv",
    "run",
    "stochastic_hypergradient",
    "theorem_hyperparams",
]
