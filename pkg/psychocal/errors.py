from typing import Iterable, List


class PsychocalError(Exception):
    """Base class of all errors raised by psychocal."""


class DomainError(PsychocalError, ValueError):
    """Invalid numeric input or violated precondition."""


class DegenerateItemError(DomainError):
    """
    Raised when items cannot be fitted because all of their observed scores fall into a single category.

    Args:
        item_ids (iterable of str): The offending items.
    """

    def __init__(self, item_ids: Iterable[str]) -> None:
        self.item_ids: List[str] = sorted(item_ids)
        super().__init__(
            "Items with a single observed score category: " + ", ".join(self.item_ids)
        )


class CoverageError(DomainError):
    """A required item has no responses to fit."""


class EnvelopeParseError(DomainError):
    """A synthetic response envelope could not be parsed."""


class UndefinedMetricError(DomainError):
    """The metric is undefined for the given inputs."""


class SchemaError(DomainError):
    """A dataset file violates its schema."""


class UnknownIdError(PsychocalError, KeyError):
    """Lookup of an item or student id that is not known to the model."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class BackendError(PsychocalError, RuntimeError):
    """A generator or scorer backend failed."""


class SimulationAbortedError(BackendError):
    """Every simulation cell of an item failed."""
