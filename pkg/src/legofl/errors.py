"""Exception hierarchy shared by every stage of the pipeline."""


class LegoError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when this escapes."""

    exit_code = 1


class ShapeError(LegoError, ValueError):
    exit_code = 4


class InputError(LegoError, ValueError):
    exit_code = 2


class ConfigError(LegoError, ValueError):
    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class PartitionError(LegoError, ValueError):
    exit_code = 2


class NumericError(LegoError, ArithmeticError):
    exit_code = 5


class MissingInputError(LegoError, FileNotFoundError):
    exit_code = 3


class SchemaError(LegoError, ValueError):
    exit_code = 4


class CheckpointError(LegoError, ValueError):
    """Malformed or truncated checkpoint container."""

    exit_code = 3


class UnsupportedVersionError(CheckpointError):
    pass
