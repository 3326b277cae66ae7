"""Domain error hierarchy.

Every error the toolkit can surface to a caller has a dedicated class whose
name doubles as its machine-readable code (``exc.code``). The CLI prints
``code=... key=value ...`` on one stderr line followed by the human message.
"""

from __future__ import annotations


class FactJuryError(Exception):
    """Base class for all domain errors."""

    def __init__(self, message: str, **context: object):
        super().__init__(message)
        self.context = context

    @property
    def code(self) -> str:
        return type(self).__name__

    def structured_line(self) -> str:
        parts = [f"code={self.code}"]
        parts += [f"{k}={v}" for k, v in self.context.items()]
        return " ".join(parts)


# --- corpus ---------------------------------------------------------------

class MissingHistoryPhysical(FactJuryError):
    pass


class DuplicateNoteId(FactJuryError):
    pass


class UnparsableTimestamp(FactJuryError):
    pass


class EmptyNoteText(FactJuryError):
    pass


class SchemaVersionMismatch(FactJuryError):
    pass


class InvariantViolation(FactJuryError):
    pass


# --- provider --------------------------------------------------------------

class ProviderExhausted(FactJuryError):
    pass


class NonRetryable(FactJuryError):
    pass


class UnscriptedRequest(FactJuryError):
    pass


class UnpricedModel(FactJuryError):
    pass


# --- benchmark ---------------------------------------------------------------

class MalformedAssistantOutput(FactJuryError):
    pass


class FinalizationArityError(FactJuryError):
    pass


class EmptyFactText(FactJuryError):
    pass


# --- generation --------------------------------------------------------------

class SectionParseError(FactJuryError):
    pass


class ContextOverflow(FactJuryError):
    pass


class InvalidTagIndex(FactJuryError):
    pass


# --- jury ----------------------------------------------------------------

class UnparsableVerdict(FactJuryError):
    pass


class NoVotes(FactJuryError):
    pass


class MissingBenchmark(FactJuryError):
    pass


# --- stats -----------------------------------------------------------------

class EmptyAfterPairwiseDeletion(FactJuryError):
    pass


class TooFewItems(FactJuryError):
    pass


class MisalignedItems(FactJuryError):
    pass


# --- report ----------------------------------------------------------------

class MissingDecisions(FactJuryError):
    pass


class MalformedThemes(FactJuryError):
    pass


# --- cli / run bookkeeping ---------------------------------------------------

class RunConfigMismatch(FactJuryError):
    pass


class MissingRunManifest(FactJuryError):
    pass
