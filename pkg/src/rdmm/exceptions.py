"""Exception hierarchy used across the package."""


class RDMMError(Exception):
    """Base class for all errors raised by rdmm."""


class InvalidParameterError(RDMMError, ValueError):
    """A configuration value or argument is outside its valid range."""


class ShapeMismatchError(RDMMError, ValueError):
    """Two fields that must live on the same grid do not."""


class IntegrationBlowupError(RDMMError, FloatingPointError):
    """Non-finite values appeared while integrating the geodesic.

    Attributes
    ----------
    step : int
        Index of the RK4 step during which the blowup was detected.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class NumericalError(RDMMError, FloatingPointError):
    """A gradient or derived quantity is non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class FormatError(RDMMError, IOError):
    """A file could not be parsed. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class GenerationError(RDMMError, RuntimeError):
    """Synthetic scene placement failed after the retry budget was exhausted."""
