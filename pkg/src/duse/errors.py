"""Exception types shared across the package."""


class DuseError(Exception):
    """Base class for all package-specific errors."""


class UsageError(DuseError):
    """Bad arguments or inconsistent option combinations (CLI exit code 2)."""


class InputTooShortError(DuseError, ValueError):
    """Signal shorter than one analysis window."""


class ManifestError(DuseError):
    """Malformed manifest file (duplicate ids, unknown fields, missing paths)."""


class CheckpointError(DuseError):
    """Base class for checkpoint I/O failures."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is truncated or structurally invalid."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version differs from what this build understands."""

    def __init__(self, found: int, expected: int):
        super().__init__(
            f"checkpoint format version {found} is not supported "
            f"(this build reads version {expected})"
        )
        self.found = found
        self.expected = expected


class TrainingDivergedError(DuseError):
    """Non-finite loss during optimization, with location diagnostics."""

    def __init__(self, message: str, *, epoch=None, step=None, loss=None):
        detail = message
        where = ", ".join(
            f"{k}={v}" for k, v in (("epoch", epoch), ("step", step), ("loss", loss))
            if v is not None
        )
        if where:
            detail = f"{message} ({where})"
        super().__init__(detail)
        self.epoch = epoch
        self.step = step
        self.loss = loss
