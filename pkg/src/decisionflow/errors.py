"""Exception types shared across the package."""


class InputShapeError(ValueError):
    """An input array does not match its declared dimension."""


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class TrainingDivergenceError(RuntimeError):
    """A loss or gradient became non-finite during training."""


class GenerationDivergenceError(RuntimeError):
    """An intermediate action became non-finite during ODE generation."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite intermediate action at flow step {step}")


class DatasetParseError(ValueError):
    """A dataset file line could not be parsed."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class SchemaError(ValueError):
    """Stored metadata disagrees with the data it describes."""
