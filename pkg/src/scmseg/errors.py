"""Exceptions shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration. CLI exit code 2."""


class EpisodeFormatError(ValueError):
    """An on-disk episode directory violates the documented format."""


class NanLossError(RuntimeError):
    """Training loss became non-finite. CLI exit code 3."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = dict(snapshot or {})
