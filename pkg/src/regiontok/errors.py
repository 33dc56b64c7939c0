"""Exception hierarchy for the region tokenization engine.

Every error raised on purpose derives from EngineError so callers (and the
CLI) can map failures to exit codes without enumerating modules.
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class FormatError(EngineError):
    """A binary or JSON artifact does not match its documented layout."""


class ValidationError(EngineError):
    """An in-memory value violates a declared invariant."""


class ConfigError(EngineError):
    """A configuration value is inconsistent or out of range."""


class GenerationError(EngineError):
    """Synthetic-data generation could not satisfy its constraints."""


class NumericsError(EngineError):
    """A numeric computation produced or received NaN/Inf."""


class DegenerateBatchError(EngineError):
    """A contrastive batch has no anchor with at least one positive."""


class EmptyMaskError(EngineError):
    """A region mask covers no usable pixels or patch centers."""


class EmptyRegionError(EngineError):
    """A region restricted to the patch grid has no member patches."""


class UnsupportedPromptError(EngineError):
    """An operation requires SLIC-derived prompts but got something else."""


class DegenerateDataError(EngineError):
    """A dataset lacks the variety an estimator needs (e.g. one class)."""
