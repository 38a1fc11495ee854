"""Two-step anchor-refinement single-shot detector at desk scale."""

__version__ = "0.1.0"
