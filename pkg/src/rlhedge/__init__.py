"""Risk-sensitive reinforcement-learning option hedging."""

__version__ = "0.1.0"
