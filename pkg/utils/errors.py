"""
Exception types raised by the classification pipeline.

Every error carries a short ``code`` so the command line can print a
single greppable line per failure.
"""


class ClassificationError(Exception):
    """Base class for all pipeline errors."""
    code = "E_GENERIC"


class ParameterError(ClassificationError, ValueError):
    """Invalid argument or configuration value."""
    code = "E_PARAM"


class ParseError(ClassificationError, ValueError):
    """Malformed file content; ``line`` is 1-based when known."""
    code = "E_PARSE"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(ClassificationError, ValueError):
    """Well-formed data that violates a domain invariant."""
    code = "E_VALIDATION"


class FormatError(ClassificationError, ValueError):
    """File layout that the reader does not support."""
    code = "E_FORMAT"


class TrainingError(ClassificationError):
    """Training data that cannot produce a classifier."""
    code = "E_TRAINING"


class ModelError(ClassificationError):
    """Unreadable or incompatible model file."""
    code = "E_MODEL"


class FingerprintError(ModelError, ParameterError):
    """Features laid out differently from what the model was trained on."""
    code = "E_FINGERPRINT"


class StorageError(ClassificationError, OSError):
    """Path that cannot be read or written."""
    code = "E_IO"
