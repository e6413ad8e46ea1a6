"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for an operation."""


class ContractError(RuntimeError):
    """A documented precondition of a call was violated."""


class ConfigError(ValueError):
    """A run configuration is invalid."""


class GenerationError(RuntimeError):
    """A synthetic scene could not be generated."""


class ParseError(ValueError):
    """A dataset or snapshot file is malformed.

    ``path`` and ``offset`` locate the problem (offset is a byte offset,
    or ``None`` when the file is missing altogether).
    """

    def __init__(self, message, path=None, offset=None):
        loc = ""
        if path is not None:
            loc = f" [{path}" + (f" @ byte {offset}" if offset is not None else "") + "]"
        super().__init__(message + loc)
        self.path = path
        self.offset = offset
