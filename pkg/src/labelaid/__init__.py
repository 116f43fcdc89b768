"""Annotation platform with machine label suggestions, controlled study
orchestration, simulated annotators, and agreement/bias analytics."""

from .labels import LabelCategory

__version__ = "0.1.0"

__all__ = ["LabelCategory", "__version__"]
