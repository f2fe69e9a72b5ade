"""Exception hierarchy shared across the package.

Every error raised on purpose derives from LimiError so the CLI can map
failure classes onto distinct exit codes.
"""


class LimiError(Exception):
    pass


class ConfigError(LimiError):
    """Invalid or malformed experiment config. Carries file/line when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:" if line is None else f"{path}:{line}:"
        super().__init__(f"{prefix} {message}" if prefix else message)


class DataFormatError(LimiError):
    """Corrupt or mismatched dataset / checkpoint file."""


class DimensionMismatch(LimiError):
    """Shape disagreement between data and a parameterized operation."""

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class NumericError(LimiError):
    """Non-finite value produced inside a compute graph. Carries layer index."""

    def __init__(self, message, layer=None):
        self.layer = layer
        super().__init__(f"layer {layer}: {message}" if layer is not None else message)


class NumericAbort(LimiError):
    """Training aborted on a non-finite objective; references last good checkpoint."""

    def __init__(self, message, last_checkpoint=None):
        self.last_checkpoint = last_checkpoint
        if last_checkpoint is not None:
            message = f"{message} (last good checkpoint: {last_checkpoint})"
        super().__init__(message)


class StateSpaceError(LimiError):
    """Exact enumeration requested on a world that is too large to enumerate."""


class SingleClassError(LimiError):
    """AUC requested on a label set with only one class present."""
