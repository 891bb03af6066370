"""Exception hierarchy shared across the package."""


class TimeragError(Exception):
    """Base class for all package-specific errors."""


class DataError(TimeragError):
    """Input data violates a contract (non-finite values, bad shapes)."""


class ParseError(DataError):
    """A record could not be parsed; message names the offending line."""


class ConflictError(DataError):
    """Duplicate identifier where uniqueness is required."""


class FormatError(TimeragError):
    """A persisted file does not match its expected format/version."""


class NumericError(TimeragError):
    """A numeric computation produced non-finite values; message names the stage."""


class TemplateError(TimeragError):
    """A prompt template contained an unresolvable placeholder."""


class ClientError(TimeragError):
    """Transport or protocol failure talking to an LLM service."""


class ClientTimeout(ClientError):
    """Request exceeded its deadline."""


class MockScriptError(ClientError):
    """An ordered mock script was exhausted; the test under-sized it."""


class ClassifierParseError(ClientError):
    """Binary classifier reply contained neither 'yes' nor 'no'."""


class AgentError(TimeragError):
    """Diagnosis failed; carries the accumulated trace for post-mortem."""

    def __init__(self, message, trace=None, transcript=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
        self.transcript = transcript
