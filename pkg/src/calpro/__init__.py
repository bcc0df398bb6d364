"""Prior-aware evidential regression with conformal calibration on
graph-structured data, plus shift-robustness bounds and active selection."""

from . import active, bounds, conformal, datagen, experiments, head, metrics, numerics, trainer
from .objective import MonotoneMap, ObjectiveConfig

__version__ = "0.1.0"

__all__ = [
    "active", "bounds", "conformal", "datagen", "experiments", "head",
    "metrics", "numerics", "trainer", "MonotoneMap", "ObjectiveConfig",
    "__version__",
]
