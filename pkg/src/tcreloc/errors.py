"""Exception types shared across the package."""


class RelocError(Exception):
    """Base class for all library errors."""


class NumericalError(RelocError):
    """Failure of a numerical routine (CLI exit code 2)."""


class ValidationError(RelocError):
    """Malformed input, file or configuration (CLI exit code 1)."""


class AngleNearPi(NumericalError):
    pass


class BehindCamera(NumericalError):
    pass


class InvalidDepth(ValidationError):
    pass


class OutOfBounds(NumericalError):
    pass


class ImageTooSmall(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class TooFewValidPixels(NumericalError):
    def __init__(self, message, level=None, iteration=None):
        super().__init__(message)
        self.level = level
        self.iteration = iteration


class SingularSystem(NumericalError):
    def __init__(self, message, level=None, iteration=None):
        super().__init__(message)
        self.level = level
        self.iteration = iteration


class EmptyTrace(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class DegenerateConfig(ValidationError):
    pass


class OverlapUnsatisfied(NumericalError):
    pass


class MalformedHeader(ValidationError):
    pass


class TruncatedData(ValidationError):
    pass


class SchemaViolation(ValidationError):
    pass


class InvalidPose(ValidationError):
    pass
