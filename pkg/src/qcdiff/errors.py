"""Exception hierarchy shared by all qcdiff modules."""


class QcdiffError(Exception):
    """Base class for all library errors."""


class DimensionError(QcdiffError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ParameterError(QcdiffError, ValueError):
    """An argument is outside its documented domain."""


class ContractError(QcdiffError, RuntimeError):
    """An API contract was violated (non-scalar loss, missing grad, ...)."""


class ConfigurationError(QcdiffError, ValueError):
    """Run/attachment configuration is inconsistent."""


class DegenerateDataError(QcdiffError, ValueError):
    """Data lacks the variation a fit requires (e.g. constant labels)."""


class MissingArtifactError(QcdiffError, FileNotFoundError):
    """An upstream checkpoint or dataset is absent."""


class GuidanceError(QcdiffError, RuntimeError):
    """A guidance step produced non-finite values."""


class NumericalError(QcdiffError, RuntimeError):
    """A numerical invariant failed at runtime."""
