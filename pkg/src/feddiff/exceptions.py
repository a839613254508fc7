"""Shared exception types."""


class LayoutError(ValueError):
    """A parameter vector or structured weights do not match the declared layout."""


class NumericError(RuntimeError):
    """A computation produced non-finite values or diverged.

    Context attributes are filled in where known so callers can report
    which op / step / client / batch went bad.
    """

    def __init__(self, message, *, op_index=None, step=None, client_id=None,
                 batch_index=None):
        super().__init__(message)
        self.op_index = op_index
        self.step = step
        self.client_id = client_id
        self.batch_index = batch_index


class ConfigError(ValueError):
    """Invalid experiment configuration (unknown key, bad value, failed validation)."""


class DataError(ValueError):
    """Dataset loading or partitioning failure."""


class CheckpointError(ValueError):
    """Corrupt, truncated, or newer-versioned checkpoint container."""
