class ConfigError(ValueError):
    """Invalid hyperparameter or model configuration."""


class InputError(ValueError):
    """Bad user input: token ids out of range, empty or oversized prompts."""


class ContractViolation(RuntimeError):
    """An internal precondition was broken (shape mismatch, write to a frozen slot, ...)."""


class EventLogError(ValueError):
    """A depth/width event log that cannot be replayed."""
