"""Exception hierarchy shared by every mignn module."""


class MignnError(Exception):
    """Base class for all errors raised by this package."""

    kind = "error"

    def one_line(self) -> str:
        msg = " ".join(str(self).split())
        return f"{self.kind}: {msg}"


class ShapeError(MignnError, ValueError):
    kind = "shape_error"


class ContractError(MignnError, ValueError):
    kind = "contract_error"


class DetachedInputError(ContractError):
    kind = "detached_input_error"


class EmptyInputError(MignnError, ValueError):
    kind = "empty_input_error"


class ValidationError(MignnError, ValueError):
    kind = "validation_error"


class LoadError(MignnError, OSError):
    kind = "load_error"


class ParseError(ValidationError):
    kind = "parse_error"

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PartitionError(MignnError, ValueError):
    kind = "partition_error"


class EpisodeError(MignnError, ValueError):
    kind = "episode_error"


class TrainingError(MignnError, RuntimeError):
    kind = "training_error"


class ConfigError(MignnError, ValueError):
    kind = "config_error"
