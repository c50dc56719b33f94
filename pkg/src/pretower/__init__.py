"""Two-tower pre-ranking models with early multi-head interaction."""

__version__ = "0.1.0"
