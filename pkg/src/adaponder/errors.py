"""Exception hierarchy. ``category`` is the short tag the CLI prints on failure."""


class PonderError(Exception):
    category = "error"


class ConfigError(PonderError, ValueError):
    category = "config"


class CapacityError(PonderError, ValueError):
    category = "capacity"


class NumericError(PonderError, FloatingPointError):
    category = "numeric"


class ContractError(PonderError, ValueError):
    category = "contract"


class CheckpointError(PonderError):
    category = "checkpoint"


class CheckpointFormatError(CheckpointError):
    pass


class ConfigConflictError(CheckpointError):
    pass


class DataError(PonderError):
    category = "data"
