"""Exception types shared across modules."""


class ConfigurationError(ValueError):
    """Invalid dataset, split, evaluation or experiment configuration."""
