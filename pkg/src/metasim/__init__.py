"""Meta-analysis of 2x2 count data with a coverage simulation harness.

Core layers:

- tables: count validation, continuity correction, effect estimates
- nnhm: normal-normal hierarchical model (moment, likelihood and
  empirical-Bayes heterogeneity estimators; Wald and t-type intervals)
- bayes: half-normal heterogeneity priors with an adaptive-grid
  posterior for the pooled effect
- glmm: binomial generalized linear mixed models for the odds ratio
- poisson_pl: profile-likelihood risk-ratio estimation from Poisson
  approximations
- simgen, harness: scenario generation and replicated coverage runs
- service, cli: FastAPI wrapper and the command-line client
"""
__version__ = "0.1.0"

from .errors import (
    ConvergenceError,
    DomainError,
    MetasimError,
    ParseError,
    ShapeError,
)
from .simgen import Design, ScenarioSpec
from .tables import Measure, MetaDataset, TwoByTwoTable

__all__ = [
    "__version__",
    "ConvergenceError",
    "Design",
    "DomainError",
    "Measure",
    "MetaDataset",
    "MetasimError",
    "ParseError",
    "ScenarioSpec",
    "ShapeError",
    "TwoByTwoTable",
]
