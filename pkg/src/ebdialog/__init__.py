"""Bayesian decoder-only dialogue models with Empirical Bayes priors.

Kept import-light on purpose: the CLI caps BLAS threads from the
environment before numpy is loaded.
"""

__version__ = "0.1.0"
