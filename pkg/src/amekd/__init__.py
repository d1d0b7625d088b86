"""Entropy-regularized cross-modal distillation on a reconfigured shared manifold."""

__version__ = "0.1.0"
