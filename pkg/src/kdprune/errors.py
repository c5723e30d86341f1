"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class KDPruneError(Exception):
    exit_code = 1


class ConfigError(KDPruneError, ValueError):
    """Invalid hyperparameter, architecture id or layer configuration."""

    exit_code = 1


class DimensionError(KDPruneError, ValueError):
    """Tensor shapes do not satisfy an operation's preconditions."""

    exit_code = 1


class ContractError(KDPruneError, ValueError):
    """A caller violated a documented precondition (empty input, non-scalar loss, ...)."""

    exit_code = 1


class DataError(KDPruneError, OSError):
    exit_code = 2


class CheckpointError(KDPruneError, OSError):
    exit_code = 3
