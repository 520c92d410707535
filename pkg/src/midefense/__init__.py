"""Mutual-information regularized defenses against model inversion, with attacks, DP baselines and game verifiers."""

__version__ = "0.1.0"
