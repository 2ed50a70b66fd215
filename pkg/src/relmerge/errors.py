"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class DegenerateMapError(ValueError):
    """A relevance map whose mean is zero cannot be normalized."""


class CapabilityError(NotImplementedError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VocabularyError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown label"


class GenerationError(RuntimeError):
    pass


class DataError(ValueError):
    pass


class HarnessError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass
