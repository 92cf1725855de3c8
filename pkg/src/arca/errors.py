"""Exception hierarchy.

Three families map onto CLI exit codes: configuration problems (exit 2),
data problems (exit 3), provider problems (exit 4).
"""


class ArcaError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(ArcaError):
    """Invalid, missing or contradictory configuration."""

    exit_code = 2


class DataError(ArcaError):
    """Malformed, inconsistent or insufficient input data."""

    exit_code = 3


class ProviderError(ArcaError):
    """A remote provider (embedding or chat) failed."""

    exit_code = 4


# --- telemetry ---------------------------------------------------------


class AllSeriesEmpty(DataError):
    """Every telemetry series in the input has zero samples."""


class NonFiniteInput(DataError):
    """A telemetry value or timestamp is NaN or infinite."""


class ZeroVector(DataError):
    """A normalized vector is all-zero and cannot be compared."""


# --- logproc -----------------------------------------------------------


class EmptyLog(DataError):
    """The raw log contains no non-blank lines."""


class ExtractorFailure(ProviderError):
    """The remote feature extractor failed; caller may fall back."""


# --- embed / providers -------------------------------------------------


class EmptyText(DataError):
    """Text to embed contains no usable tokens."""


class DimensionMismatch(DataError):
    """Vector length differs from the configured dimension."""


class TransientProviderError(ProviderError):
    """Retryable remote failure (timeouts, 429/5xx)."""


class ProviderUnavailable(ProviderError):
    """Remote provider still failing after all retries."""


# --- kb ----------------------------------------------------------------


class DuplicateId(DataError):
    """Bug id already present in the knowledge base."""


class CorruptStore(DataError):
    """On-disk knowledge base failed checksum verification."""


class VersionMismatch(DataError):
    """On-disk knowledge base uses an unsupported format version."""


class EmptyTelemetryStore(DataError):
    """No telemetry vectors stored; statistics cannot be computed."""


# --- ann ---------------------------------------------------------------


class TooFewVectors(DataError):
    """Fewer vectors than requested clusters."""


class EmptyIndex(DataError):
    """Search attempted against an index with no vectors."""


# --- pipeline ----------------------------------------------------------


class NoIndex(DataError):
    """Knowledge base has no similarity index built."""


class BudgetTooSmall(ConfigError):
    """Token budget too small to fit even one candidate."""


class UnparseableVerdict(ProviderError):
    """Remote judge reply lacks the required ANSWER line."""


class MissingResolution(DataError):
    """Chosen bug has no resolution text to derive a plan from."""


# --- harness -----------------------------------------------------------


class InfeasibleSplit(DataError):
    """Could not split the corpus under the pairing constraint."""


class DegenerateLabels(DataError):
    """Fewer than two distinct labels in the clustering input."""
