"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class FormatError(ValueError):
    """Malformed on-disk data. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalFailure(RuntimeError):
    def __init__(self, message: str, client: int | None = None, round_index: int | None = None):
        super().__init__(message)
        self.client = client
        self.round_index = round_index


class ConstructionFailure(RuntimeError):
    pass
