"""Exception types shared across the package."""


class TfeNetError(Exception):
    """Base class for all package-specific errors."""


class ArgumentError(TfeNetError, ValueError):
    """A caller-supplied argument violates a documented precondition."""


class VolumeFormatError(TfeNetError, IOError):
    """A volume file is malformed; carries the byte offset of the problem."""

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (at byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class ConfigError(TfeNetError, ValueError):
    """A run configuration file or flag set fails schema validation."""


class TrainingDiverged(TfeNetError, RuntimeError):
    """A non-finite loss was encountered; carries step diagnostics."""

    def __init__(self, message: str, stage: str, epoch: int, step: int, loss: float):
        super().__init__(
            f"{message} (stage={stage}, epoch={epoch}, step={step}, loss={loss!r})"
        )
        self.stage = stage
        self.epoch = epoch
        self.step = step
        self.loss = loss
