"""Multi-task decision transformer for unsignalized-intersection driving."""

__version__ = "0.1.0"
