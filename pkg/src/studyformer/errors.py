"""Exception types shared across the package."""


class StudyformerError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(StudyformerError, ValueError):
    """Operand shapes are incompatible with an operation's contract."""


class ContractError(StudyformerError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(StudyformerError, ValueError):
    """A configuration value or combination of values is invalid."""


class CapacityError(StudyformerError, ValueError):
    """Input exceeds a hard capacity limit of the architecture."""


class ValidationError(StudyformerError, ValueError):
    """A data file failed validation while being loaded."""


class InputError(StudyformerError, ValueError):
    """An input file could not be read or decoded."""


class FormatError(StudyformerError, ValueError):
    """A binary file is malformed, truncated, or of the wrong version."""


class UndefinedMetricError(StudyformerError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class TrainingError(StudyformerError, RuntimeError):
    """Training aborted (e.g. the loss became non-finite)."""
