"""Exception hierarchy.

The CLI maps the three top-level families onto exit codes:
``UserError`` -> 1, ``ProviderError`` -> 2, ``InvariantViolation`` -> 3.
"""

from __future__ import annotations


class AimemError(Exception):
    exit_code = 3


class UserError(AimemError, ValueError):
    exit_code = 1


class ProviderError(AimemError):
    exit_code = 2


class InvariantViolation(AimemError):
    exit_code = 3


# corpus
class MalformedRecord(UserError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class DuplicateId(MalformedRecord):
    pass


class EmptyCorpus(UserError):
    pass


class InsufficientBudget(UserError):
    pass


# providers
class ContextOverflow(ProviderError):
    pass


class TransportError(ProviderError):
    pass


class TransientError(TransportError):
    """Retryable transport failure (timeouts, 5xx)."""


class RateLimited(TransportError):
    pass


class UnparsableJudgeOutput(ProviderError):
    pass


# memory
class UnknownTag(UserError):
    pass


class CycleRejected(UserError):
    pass


class EmptyMemory(UserError):
    pass


class EmptyEvidence(UserError):
    pass


# lpm data
class DoublePrefix(UserError):
    pass


class EmptyPrompt(UserError):
    pass


class UnknownPhrase(UserError):
    pass


class EmptyNote(UserError):
    pass


class InsufficientChunks(UserError):
    pass


class SkeletonMonoculture(UserError):
    def __init__(self, skeleton: str, share: float):
        self.skeleton = skeleton
        self.share = share
        super().__init__(f"skeleton {skeleton!r} covers {share:.0%} of the batch")


class EmptyExamples(UserError):
    pass


# bench
class DegenerateVariance(UserError):
    pass


# config / run store
class ConfigError(UserError):
    pass


class CorruptRunLog(UserError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"run log line {line}: {message}")
