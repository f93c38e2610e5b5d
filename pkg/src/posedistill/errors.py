"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid or mutually inconsistent configuration."""


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
