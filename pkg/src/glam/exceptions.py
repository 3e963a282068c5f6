"""Exception types. Each carries a short machine-readable ``category`` used by the CLI."""


class GlamError(Exception):
    category = "error"


class ValidationError(GlamError, ValueError):
    category = "invalid_input"


class DataError(GlamError):
    category = "data"


class ConfigError(GlamError):
    category = "config"


class DivergenceError(GlamError, FloatingPointError):
    category = "divergence"


class NotFittedError(GlamError, AttributeError):
    category = "not_fitted"
