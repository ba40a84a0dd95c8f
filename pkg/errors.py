"""
Exceptions and warnings shared by every fusionsplat module.
The CLI maps these onto exit codes (2 = validation, 3 = numerical).
"""


class FusionSplatError(Exception):
    """Base class for all fusionsplat errors"""


class DegenerateRotationError(FusionSplatError, ValueError):
    """Quaternion with zero norm"""


class RangeError(FusionSplatError, ValueError):
    """Time value or window outside its allowed range"""


class DimensionMismatchError(FusionSplatError, ValueError):
    """Arrays that must share a shape do not"""


class EmptyValidityError(FusionSplatError, ValueError):
    """A metric was asked to average over zero valid pixels"""


class ConfigurationError(FusionSplatError, ValueError):
    """Invalid configuration key, value or combination"""


class NumericalError(FusionSplatError, ArithmeticError):
    """Non-finite value reached a loss or an optimizer update"""


class NonFiniteParameterError(NumericalError):
    def __init__(self, index, what, details=''):
        self.index = int(index)
        self.what = what
        message = f"non-finite {what} for gaussian {self.index}"
        if details:
            message += f" ({details})"
        super().__init__(message)


class DatasetValidationError(FusionSplatError):
    def __init__(self, problems):
        self.problems = list(problems)
        lines = '\n  '.join(self.problems)
        super().__init__(f"dataset validation failed with {len(self.problems)} problem(s):\n  {lines}")


class CheckpointIntegrityError(FusionSplatError):
    """Checkpoint file is truncated, corrupt or incomplete"""


class CheckpointVersionError(FusionSplatError):
    def __init__(self, found, supported):
        self.found = found
        self.supported = supported
        super().__init__(f"checkpoint version {found} is not supported (expected version {supported})")


class ResolutionMismatchError(FusionSplatError, ValueError):
    """Checkpoint and dataset were built for different image sizes"""


class UnknownSceneError(FusionSplatError, ValueError):
    """Scene name is not one of the built-in analytic scenes"""


class EmptySupervisionWarning(UserWarning):
    """A loss or metric had no valid pixels (or views) to average over"""


VALIDATION_ERRORS = (
    DatasetValidationError,
    ConfigurationError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    ResolutionMismatchError,
    UnknownSceneError,
    RangeError,
    DimensionMismatchError,
    EmptyValidityError,
)
