"""Exception types raised across the package."""


class VrcError(Exception):
    """Base class for every error raised by vrcoloc."""


class ValidationError(VrcError, ValueError):
    """A record violates a type invariant (bad box, dimension mismatch, ...)."""


class SchemaVersionError(ValidationError):
    """A file carries a schema name or version this build cannot read."""


class ParseError(VrcError):
    """A file could not be parsed as a text record."""


class DegenerateImageError(VrcError, ValueError):
    """An image has fewer than two regions, so no ordered pair exists."""


class ConfigurationError(VrcError, ValueError):
    """A configuration cannot be satisfied (e.g. no predicate pool is large enough)."""


class SupervisionLeakError(VrcError):
    """Test-split predicates reached a training routine."""


class NonFiniteLossError(VrcError, FloatingPointError):
    """Training produced a NaN or infinite loss."""


class SearchSpaceTooLarge(VrcError):
    """Exhaustive search was refused because the labeling space exceeds the cap."""


class UndefinedMetricError(VrcError, ZeroDivisionError):
    """A metric was requested over zero images or zero bags."""


class EvaluationDataError(VrcError):
    """Ground truth needed for evaluation is missing."""


class EpisodeSkip(VrcError):
    """A bag cannot form a training episode (an image has no matched annotation)."""
