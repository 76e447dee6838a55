"""Exception hierarchy shared across the toolkit.

Every error that can surface at the CLI boundary maps to one of the
documented exit codes: 2 (configuration / input), 3 (numeric or capacity
failure), 4 (external service failure).
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_EXTERNAL = 4


class QuantalignError(Exception):
    """Base class for all toolkit errors."""

    exit_code = EXIT_CONFIG
    kind = "error"


class ConfigError(QuantalignError):
    """Invalid configuration, arguments, or input data."""

    exit_code = EXIT_CONFIG
    kind = "config"


class CapacityError(QuantalignError):
    """A sequence or cache would exceed the model's context window."""

    exit_code = EXIT_NUMERIC
    kind = "capacity"


class NumericError(QuantalignError):
    """A computation produced non-finite values.

    ``step`` carries the offending training/decoding step when known, and
    ``last_good`` may reference the most recent healthy checkpoint.
    """

    exit_code = EXIT_NUMERIC
    kind = "numeric"

    def __init__(self, message: str, step: int | None = None, last_good: str | None = None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


class ExternalServiceError(QuantalignError):
    """A remote endpoint failed after retries were exhausted."""

    exit_code = EXIT_EXTERNAL
    kind = "external"


class CheckpointError(ConfigError):
    """Base for checkpoint file problems."""

    kind = "checkpoint"


class CheckpointSchemaError(CheckpointError):
    """Header is malformed or violates config/tensor invariants."""

    kind = "checkpoint-schema"


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared payload or checksum."""

    kind = "checkpoint-truncated"


class CheckpointChecksumError(CheckpointError):
    """Stored checksum does not match the payload."""

    kind = "checkpoint-checksum"
