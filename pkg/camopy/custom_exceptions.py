"""
Custom Exceptions for CamoPy.
"""


class ConfigException(Exception):
    """Exception raised when a configuration value is invalid or a configuration
    document contains unknown keys"""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class DataException(Exception):
    """Exception raised given when there is some error in user-provided data, such
    as an empty manifest"""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ManifestSchemaException(DataException):
    """Exception raised when a manifest record does not follow the documented
    schema. The message names the offending record and field."""


class AttributeSumException(DataException):
    """Exception raised when the attribute proportions of a record do not sum to
    one within the ingestion tolerance.

    :param message:
        Human readable description
    :param total:
        The offending sum
    """

    def __init__(self, message: str, total: float):
        super().__init__(message)
        self.total = total


class ShapeMismatchException(ValueError):
    """Exception raised when tensors or rasters do not have the expected shape"""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class NonFiniteException(ValueError):
    """Exception raised when a loss term or an input contains NaN or inf values"""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class RasterDecodeException(OSError):
    """Exception raised when an image, mask or fixation file cannot be decoded"""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class CheckpointException(Exception):
    """Exception raised when a checkpoint cannot be written, or does not match the
    requested model configuration"""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message
