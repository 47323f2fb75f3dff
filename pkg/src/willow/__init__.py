"""willow: Williams' decomposition machinery for finite-type superprocesses.

Library layout follows the problem structure: deterministic fields
(`numerics`), eigendata (`spectral`), weighted-process transforms
(`girsanov`), spine laws (`spine`), the decomposition samplers
(`williams`), the independent branching-particle oracle (`particle`),
and the identity-checking battery (`verify`).
"""

from .errors import BudgetError, ModelError, NumericError, WillowError
from .model import (FiniteMeasure, MultitypeModel, TimeGrid, ValidationReport,
                    load_model, model_from_dict, reference_model, save_model,
                    validate_model)

__version__ = "0.1.0"

__all__ = [
    "BudgetError", "ModelError", "NumericError", "WillowError",
    "FiniteMeasure", "MultitypeModel", "TimeGrid", "ValidationReport",
    "load_model", "model_from_dict", "reference_model", "save_model",
    "validate_model", "__version__",
]
