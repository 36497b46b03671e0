class EngageError(Exception):
    """Base class for all pipeline errors."""


class ParameterError(EngageError, ValueError):
    pass


class CoverageError(EngageError):
    pass


class DataError(EngageError, ValueError):
    pass


class ProtocolError(EngageError):
    pass


class ReportError(EngageError):
    pass


class ModelFormatError(EngageError):
    pass
