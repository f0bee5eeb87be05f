"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor or vector shapes do not line up."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's precondition."""


class EmptyMemoryError(LookupError):
    """Raised when a neighbor query hits an exemplar memory with no records."""


class FeatureFileError(ValueError):
    """Malformed feature or checkpoint file.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
