"""Constrained black-box adversarial attacks on tabular classifiers and their evaluation."""

__version__ = "0.1.0"
