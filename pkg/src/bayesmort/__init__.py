"""Bayesian mortality forecasting on an age-by-year grid.

Two models are provided: a dynamic Heligman-Pollard curve whose eight
parameters follow a truncated random walk (:mod:`bayesmort.hpdyn`), and an
intrinsic Gaussian Markov random field on the logit death probabilities
(:mod:`bayesmort.gmrf`). Both produce posterior draws that
:mod:`bayesmort.forecast` turns into predictive intervals and survival
curves, and :mod:`bayesmort.evalharness` scores in rolling-origin backtests.
"""

from .errors import BayesMortError, DataError, IngestionError, NumericalError, ValidationError
from .lifetable import MortalityGrid

__version__ = "0.1.0"

__all__ = ["BayesMortError", "DataError", "IngestionError", "NumericalError", "ValidationError",
           "MortalityGrid", "__version__"]
