"""Exception types shared across the package."""


class UrecaError(Exception):
    """Base class for all package errors."""


class MalformedInputError(UrecaError, ValueError):
    pass


class UnsupportedRleError(MalformedInputError):
    """Raised for compressed (string) RLE counts, which are not handled."""


class DimensionMismatchError(UrecaError, ValueError):
    pass


class EmptyRegionError(UrecaError, ValueError):
    pass


class UnknownNodeError(UrecaError, KeyError):
    pass


class WeightsFormatError(UrecaError, ValueError):
    pass


class TemplateError(UrecaError, KeyError):
    pass


class ClientError(UrecaError, RuntimeError):
    """An inference service could not be reached or kept failing after retries."""


class EmptyJoinError(UrecaError, ValueError):
    pass


class ConfigError(UrecaError, ValueError):
    pass
