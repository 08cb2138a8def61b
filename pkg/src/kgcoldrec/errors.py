"""Exception hierarchy shared by every stage.

The CLI maps the three top-level families onto exit codes
(config -> 1, data -> 2, backend -> 3).
"""


class KgRecError(Exception):
    """Base class for all package errors."""


class ConfigError(KgRecError):
    pass


class DataError(KgRecError):
    pass


class BackendError(KgRecError):
    pass


class CorpusError(DataError):
    pass


class StoreError(DataError):
    pass


class ExtractionError(DataError):
    pass


class ParseError(DataError):
    pass


class UnscriptedPromptError(BackendError):
    def __init__(self, key: str):
        super().__init__(f"unscripted prompt ({key})")
        self.key = key


class PipelineError(KgRecError):
    """Wraps a failure with the name of the stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
