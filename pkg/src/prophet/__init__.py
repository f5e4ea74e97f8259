"""Option-aware fuzzing pipeline driven by documentation analysis."""

__version__ = "0.1.0"
