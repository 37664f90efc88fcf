"""Context-aware residual Lagrangian dynamics for model predictive control of manipulators."""

__version__ = "0.1.0"
