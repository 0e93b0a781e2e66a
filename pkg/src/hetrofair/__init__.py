"""Graph collaborative filtering with fairness-aware propagation."""

__version__ = "0.1.0"
