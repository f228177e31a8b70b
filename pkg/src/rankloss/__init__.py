"""Cross-entropy, its sampled approximations, and their ranking-metric bounds."""

__version__ = "0.1.0"
