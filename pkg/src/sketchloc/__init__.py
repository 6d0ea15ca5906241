"""Monte Carlo localization in hand-drawn sketch maps with a tracked map scale."""

__version__ = "0.1.0"
