class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf produced from finite inputs."""


class ConfigError(ValueError):
    """Invalid experiment or model configuration."""

    def __init__(self, message, keys=()):
        self.keys = list(keys)
        if self.keys:
            message = f"{message}: {', '.join(self.keys)}"
        super().__init__(message)


class StateError(RuntimeError):
    """Operation called in the wrong lifecycle state (e.g. unmatched remove)."""


class TrainingAborted(RuntimeError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(f"{message} {self.diagnostics}" if self.diagnostics else message)
