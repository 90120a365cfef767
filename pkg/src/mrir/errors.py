"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending key."""


class ProvenanceError(RuntimeError):
    """A caption source that was explicitly requested is unavailable."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss; the message names the term."""


class SamplingError(RuntimeError):
    """Sampling diverged; the message names the step index."""
