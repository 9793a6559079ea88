"""Exception types shared across the engine.

Every error carries a short machine-readable ``code`` so callers (and the
CLI) can map failures to exit codes and messages without string matching.
"""


class CplearnError(Exception):
    """Base class for all engine errors."""

    code = "error"


class DimensionError(CplearnError):
    """Operand shapes are incompatible with the requested operation."""

    code = "dim-mismatch"


class NumericError(CplearnError):
    """A NaN/Inf appeared where only finite values are allowed."""

    code = "non-finite"


class DegenerateInputError(CplearnError):
    """Input is structurally valid but degenerate (zero vector, empty list)."""

    code = "degenerate-input"


class ContractError(CplearnError):
    """A caller violated an API precondition."""

    code = "contract"


class BankError(CplearnError):
    """Base class for feature-bank / lexicon / cache / checkpoint file errors."""

    code = "bank-error"


class BankMagicError(BankError):
    code = "bad-magic"


class BankVersionError(BankError):
    code = "bad-version"


class BankTruncatedError(BankError):
    code = "truncated"


class BankDimError(BankError):
    code = "dim-mismatch"


class BankRecordError(BankError):
    """A loaded record violates its invariants (names the record_id)."""

    code = "bad-record"


class SamplingError(CplearnError):
    code = "sampling"


class SplitError(CplearnError):
    code = "split"


class CacheBuildError(CplearnError):
    code = "cache-build"


class CacheQueryError(CplearnError):
    code = "cache-query"


class TransportError(CplearnError):
    """Remote encoder failure after retries; ``retries`` is the attempt count."""

    code = "transport"

    def __init__(self, message: str, retries: int = 0):
        super().__init__(message)
        self.retries = retries


class MetricError(CplearnError):
    code = "metric"


class TrainingError(CplearnError):
    code = "training"
