"""Shared exception hierarchy.

Every toolkit-raised error derives from ItftLabError so the CLI can map
input/usage problems to exit code 2 in one place.
"""


class ItftLabError(Exception):
    """Base class for all toolkit errors."""


class CorpusError(ItftLabError):
    """Invalid corpus construction, ingestion or sampling."""


class AlignmentError(CorpusError):
    """Line or verse alignment mismatch between the two sides."""

    def __init__(self, message: str, left_count: int | None = None, right_count: int | None = None):
        super().__init__(message)
        self.left_count = left_count
        self.right_count = right_count


class TextPrepError(ItftLabError):
    """Tokenizer / subword model errors."""


class DivergenceError(ItftLabError):
    """Distribution building or divergence computation errors."""


class MetricsError(ItftLabError):
    """BLEU / correlation errors."""


class TrainerError(ItftLabError):
    """Toy trainer configuration or data errors."""


class OrchestratorError(ItftLabError):
    """Experiment planning / execution errors."""
