"""Desk-scale comparison of observer-based SOC estimators for Li-ion cells."""

__version__ = "0.1.0"

from .errors import (ConfigurationError, DesignError, DomainError, FormatError,  # noqa: E402
                     IdentificationError, InputError, NumericalError, ObsbenchError,
                     ParameterError)
from .model import CellParams, Loadfile, OcvCurve, ParamMap, StateVector, simulate  # noqa: E402
from .observers import ObserverGains, ObserverState, observer_step, place_poles  # noqa: E402

__all__ = [
    "__version__",
    "CellParams", "Loadfile", "OcvCurve", "ParamMap", "StateVector", "simulate",
    "ObserverGains", "ObserverState", "observer_step", "place_poles",
    "ObsbenchError", "DomainError", "ParameterError", "FormatError", "InputError",
    "DesignError", "ConfigurationError", "IdentificationError", "NumericalError",
]
