"""Vertical federated logistic regression by parallel ADMM sharing."""
__version__ = "0.1.0"
