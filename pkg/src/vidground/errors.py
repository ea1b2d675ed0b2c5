"""Exception hierarchy shared across the package."""


class VidgroundError(Exception):
    """Base class for all package-specific errors."""


class FormatError(VidgroundError):
    """Malformed binary container (bad magic, version, or truncated payload)."""


class DataError(VidgroundError):
    """Payload parsed but contains invalid values (NaN/Inf)."""


class ValidationError(VidgroundError):
    """Record or manifest invariant breach."""


class GenerationError(VidgroundError):
    """Synthetic corpus configuration cannot be realized."""


class InputError(VidgroundError):
    """Runtime tensor input outside the supported envelope."""


class ShapeError(VidgroundError):
    """Mismatched tensor dimensions between coupled arguments."""


class ConfigError(VidgroundError):
    """Invalid model or training configuration value."""


class TrainingDiverged(VidgroundError):
    """Loss became non-finite during optimization."""

    def __init__(self, message: str, batch_id: int, dump_path: str | None = None):
        super().__init__(message)
        self.batch_id = batch_id
        self.dump_path = dump_path
