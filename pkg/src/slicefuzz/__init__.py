"""Coverage-guided fuzzing driven by control-flow packet streams."""

__version__ = "0.1.0"
