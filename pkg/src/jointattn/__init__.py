"""Joint attention learning for first- and third-person video co-analysis."""

__version__ = "0.1.0"
