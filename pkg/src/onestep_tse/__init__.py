"""One-step target-signal extraction with mean-velocity transport."""

__version__ = "0.1.0"
