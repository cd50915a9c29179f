"""Exception hierarchy.

Every error carries a short ``category`` string so the CLI can report a
machine-readable failure class alongside the exit code.
"""


class FedAsdError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(FedAsdError, ValueError):
    category = "config"
    exit_code = 2


class DataError(FedAsdError, ValueError):
    category = "data"
    exit_code = 3


class EmptyDatasetError(DataError):
    pass


class SchemaError(DataError):
    pass


class ShapeError(FedAsdError, ValueError):
    category = "shape"
    exit_code = 4


class NumericError(FedAsdError, ArithmeticError):
    category = "numeric"
    exit_code = 4


class StaleCacheError(FedAsdError, RuntimeError):
    category = "cache"
    exit_code = 4


class CryptoError(FedAsdError, ValueError):
    category = "crypto"
    exit_code = 5


class KeyMismatchError(CryptoError):
    pass


class IntegrityError(FedAsdError, ValueError):
    """A results file whose embedded fingerprint or digest does not verify."""

    category = "integrity"
    exit_code = 6
