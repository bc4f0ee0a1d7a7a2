"""Error taxonomy shared by the library and the CLI exit-code mapping."""


class ConfigError(ValueError):
    """Invalid or contradictory run configuration."""


class DataError(ValueError):
    """Missing, malformed, or unsatisfiable data (datasets, scenes, rasters)."""


class NumericError(RuntimeError):
    """Non-finite values or numerically impossible requests during a run."""
