"""Bayesian panel VAR with stochastic volatility in mean."""

__version__ = "0.1.0"
