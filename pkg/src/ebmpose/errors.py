"""Exception types shared across the package."""


class EbmPoseError(Exception):
    """Base class for all package errors."""


class DegenerateRotation(EbmPoseError):
    pass


class NotARotation(EbmPoseError):
    pass


class DegenerateMean(EbmPoseError):
    pass


class ConfigError(EbmPoseError):
    pass


class BadSpec(EbmPoseError):
    pass


class RejectionBudgetExceeded(EbmPoseError):
    pass


class DomainError(EbmPoseError):
    pass


class StepSizeUnderflow(EbmPoseError):
    pass


class NonFiniteLoss(EbmPoseError):
    pass


class ShapeMismatch(EbmPoseError):
    pass


class VersionMismatch(EbmPoseError):
    pass


class CorruptCheckpoint(EbmPoseError):
    pass


class ParseError(EbmPoseError):
    """Malformed input file. ``lineno`` is 1-based (0 when unknown)."""

    def __init__(self, message, lineno=0):
        self.lineno = lineno
        if lineno:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class RefinementFailed(EbmPoseError):
    pass


class NoCandidates(EbmPoseError):
    pass


class DegenerateAlignment(EbmPoseError):
    pass
