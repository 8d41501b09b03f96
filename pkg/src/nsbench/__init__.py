"""Nonstationarity benchmark for deep-learning variogram range regressors."""

__version__ = "0.1.0"

from .grid import GridSpec, LabelMeta, Realization  # noqa: E402

__all__ = ["GridSpec", "LabelMeta", "Realization", "__version__"]
