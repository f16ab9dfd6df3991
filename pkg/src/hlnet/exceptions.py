class HlnError(Exception):
    """Base class for errors raised by hlnet."""


class ShapeError(HlnError, ValueError):
    pass


class ContractError(HlnError, ValueError):
    pass


class InvalidGeometryError(HlnError, ValueError):
    pass


class NonFiniteError(HlnError, FloatingPointError):
    def __init__(self, message: str, tensor_name: str | None = None, step: int | None = None):
        super().__init__(message)
        self.tensor_name = tensor_name
        self.step = step


class EmptyKeyError(HlnError, ValueError):
    pass


class DegenerateMaskError(HlnError, ValueError):
    pass


class ConfigError(HlnError, ValueError):
    pass


class DatasetParseError(HlnError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(HlnError):
    pass
