"""Exception hierarchy shared across the package."""


class JsonSynthError(Exception):
    """Base class for every error raised by this package."""


# schema / extraction
class NoJsonFound(JsonSynthError):
    pass


class ParseError(JsonSynthError):
    pass


class SchemaError(JsonSynthError):
    pass


# metrics
class EmptySequence(JsonSynthError):
    pass


class EmptyReferenceSet(JsonSynthError):
    pass


class EmptyHypothesis(JsonSynthError):
    pass


class EmptyReferences(JsonSynthError):
    pass


class EmptyInput(JsonSynthError):
    pass


class EmptyBatch(JsonSynthError):
    pass


# nle
class NonMonotonicBounds(JsonSynthError):
    pass


class MissingMetric(JsonSynthError):
    pass


# judge / reward
class MissingCategory(JsonSynthError):
    def __init__(self, name: str):
        super().__init__(f"judge reply has no answer for category {name!r}")
        self.name = name


class AmbiguousAnswer(JsonSynthError):
    pass


class UnparseableAnswer(JsonSynthError):
    pass


class MissingFeedbackPrefix(JsonSynthError):
    pass


# policy
class MissingPromptBlock(JsonSynthError):
    pass


class DegenerateTrajectory(JsonSynthError):
    pass


# agents
class AgentError(JsonSynthError):
    """Failure talking to an external role (generator, judge, optimizer)."""


class Timeout(AgentError):
    pass


class HttpError(AgentError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"endpoint returned HTTP {status}: {body[:200]}")
        self.status = status


class TranscriptExhausted(AgentError):
    pass


class TranscriptMismatch(AgentError):
    pass


class BudgetExceeded(JsonSynthError):
    def __init__(self, which: str, message: str = ""):
        super().__init__(message or f"{which} budget exhausted")
        self.which = which


# envsim
class RegimeViolation(JsonSynthError):
    pass


# orchestrator / config
class ConfigError(JsonSynthError):
    pass
