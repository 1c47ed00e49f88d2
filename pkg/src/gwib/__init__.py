"""Gromov-Wasserstein information bottleneck for counterfactual regression."""

__version__ = "0.1.0"
