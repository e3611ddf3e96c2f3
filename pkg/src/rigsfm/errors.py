"""Exception types shared across the package."""

from __future__ import annotations

from pathlib import Path


class RigSfMError(Exception):
    """Base class for package errors."""


class ParseError(RigSfMError):
    """A file failed to parse; carries the path and 1-based line number."""

    def __init__(self, path, line_no: int, message: str):
        self.path = Path(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class ReferentialIntegrityError(RigSfMError):
    """Input files reference entities that do not exist."""


class InitializationFailure(RigSfMError):
    """No usable initial unit pair, or the initial model collapsed."""


class ReconstructionFailure(RigSfMError):
    """The incremental pipeline could not produce a model."""


class DegenerateInputError(RigSfMError):
    """Estimation input admits no unique model (e.g. collinear plane points)."""


class GenerationError(RigSfMError):
    """Synthetic scene configuration is geometrically infeasible."""


class AggregationFailure(RigSfMError):
    """No merge candidate has any visual overlap with the reference scene."""
