"""Energy-aware training and cost comparison for end-to-end spoken language understanding models."""

__version__ = "0.1.0"
