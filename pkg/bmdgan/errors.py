"""
Exceptions shared by every bmdgan module.
"""
from typing import Optional


class BMDGANError(Exception):
    """
    Base class for errors raised by bmdgan.
    """


class InvalidArgument(BMDGANError, ValueError):
    """
    Raised when an operation receives arguments outside of its contract.
    """


class ImageFormatError(BMDGANError):
    """
    Raised when an image container on disk is malformed. The offending header field is named in
    the message.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class SingularFitError(BMDGANError):
    """
    Raised when a least-squares line cannot be determined from the given samples.
    """


class UndefinedCorrelation(BMDGANError):
    """
    Raised when a correlation coefficient is requested for constant data.
    """


class ConfigError(BMDGANError):
    """
    Raised on invalid run configuration. Carries the dotted key and, when known, the line of the
    configuration file it was found on.
    """

    def __init__(self, key: str, message: str, line: Optional[int] = None):
        self.key = key
        self.line = line
        location = f"{key}" if line is None else f"{key} (line {line})"
        super().__init__(f"{location}: {message}")


class TrainingDiverged(BMDGANError):
    """
    Raised when a training step produces a non-finite loss.
    """
