"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class StateError(RuntimeError):
    """An object is not in the state an operation requires (e.g. missing gradients)."""


class FormatError(ValueError):
    """A binary container could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibleVersionError(FormatError):
    """A container was written by an unsupported format version."""


class ConfigError(ValueError):
    """A configuration file or value is invalid."""

    def __init__(self, message, line=None, key=None):
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if key is not None:
            prefix.append(f"key {key!r}")
        if prefix:
            message = ", ".join(prefix) + ": " + message
        super().__init__(message)
        self.line = line
        self.key = key


class TrainingDivergedError(RuntimeError):
    """A non-finite loss was produced during training."""

    def __init__(self, iteration, components):
        parts = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {parts}")
        self.iteration = iteration
        self.components = dict(components)
