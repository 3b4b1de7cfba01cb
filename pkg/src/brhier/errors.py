"""Shared exception types.

Exit-code mapping in the CLI: ConfigError and CheckpointError are validation
failures (exit 1); NumericFault is a numeric fault (exit 2).
"""


class ContractViolation(ValueError):
    """An argument or call sequence violated a documented precondition."""


class DivergenceInfinite(ArithmeticError):
    """KL divergence is infinite: p places real mass where q has none."""


class NumericFault(ArithmeticError):
    """A non-finite value appeared where the computation requires finiteness."""


class RiccatiError(ArithmeticError):
    """The Riccati equation has no stabilizing solution for the given plant."""


class ConfigError(ValueError):
    """Experiment configuration failed strict validation."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, incompatible, or does not match the config."""
