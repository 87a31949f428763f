"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed or out-of-contract input."""


class LayerRangeError(InputError, IndexError):
    """Layer index outside the backend's stack."""


class CapabilityError(RuntimeError):
    """Backend lacks a capability an operation needs (e.g. gradients)."""


class CatalogueParseError(InputError):
    """A catalogue or word-list file could not be parsed.

    ``line`` and ``column`` are 1-based when known.
    """

    def __init__(self, message, path=None, line=None, column=None):
        self.path = path
        self.line = line
        self.column = column
        where = str(path) if path is not None else "<string>"
        if line is not None:
            where += f":{line}"
            if column is not None:
                where += f":{column}"
        super().__init__(f"{where}: {message}")


class SynthesisDivergedError(RuntimeError):
    """The synthesis loss became non-finite."""

    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at step {step}")
