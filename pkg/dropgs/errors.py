"""Exception types shared across the dropgs package."""

from __future__ import annotations

from pathlib import Path


class DropGSError(Exception):
    """Base class for every error raised by dropgs."""


class InvalidParameterError(DropGSError, ValueError):
    """An argument violates the documented precondition of an operation."""


class ConfigError(InvalidParameterError):
    """A configuration value (file, flag or default override) is unusable."""

    def __init__(self, key: str, value: object, reason: str = ""):
        self.key = key
        self.value = value
        msg = f"bad config value {key}={value!r}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class NonFiniteGradientError(InvalidParameterError):
    """A gradient entry is NaN or infinite."""

    def __init__(self, gaussian: int, param: str):
        self.gaussian = gaussian
        self.param = param
        super().__init__(f"non-finite gradient for gaussian {gaussian}, parameter {param}")


class TrainingDivergedError(DropGSError):
    """The training loss became non-finite."""

    def __init__(self, iteration: int, value: float):
        self.iteration = iteration
        self.value = value
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")


class SceneFormatError(DropGSError):
    """A scene manifest or cloud file cannot be interpreted."""


class SceneFileMissingError(DropGSError, FileNotFoundError):
    """A file referenced by a scene manifest does not exist."""

    def __init__(self, path: Path | str):
        self.path = str(path)
        super().__init__(f"missing file: {self.path}")
