"""Exception types shared across the pipeline (CLI maps them to exit codes)."""


class ConfigError(ValueError):
    """Invalid configuration; rejected before any work starts."""


class DataError(ValueError):
    """Input data missing, malformed at file level, or empty after filtering."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization."""
