"""Exception hierarchy shared by every obsbench module.

The CLI maps these onto exit codes: ``DesignError`` exits with 2, all other
``ObsbenchError`` subclasses exit with 1.
"""


class ObsbenchError(Exception):
    """Base class for all errors raised by obsbench."""


class DomainError(ObsbenchError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class ParameterError(DomainError):
    """Cell parameters violate their physical invariants."""


class FormatError(ObsbenchError, ValueError):
    """A file or record could not be parsed."""


class InputError(ObsbenchError, ValueError):
    """A measurement fed to an estimator is unusable (e.g. non-finite)."""


class DesignError(ObsbenchError):
    """Observer gains cannot be designed or fail the Hurwitz gate."""


class ConfigurationError(DesignError):
    """A scenario asks for an estimator whose design is not Hurwitz."""


class IdentificationError(ObsbenchError):
    """Offline identification (OCV extraction, PSO fitting) failed."""


class NumericalError(ObsbenchError, ArithmeticError):
    """A filter lost numerical validity (e.g. covariance not PSD)."""
