"""Latent-graph scene classification with feature-category masking and a
two-domain generalization experiment harness on synthetic data."""

__version__ = "0.1.0"
