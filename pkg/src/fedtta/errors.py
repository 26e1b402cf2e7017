"""Exception hierarchy shared across the package."""


class FedttaError(Exception):
    """Base class for all package errors."""


class DimensionError(FedttaError):
    """Shape or width mismatch between arrays, specs, or parameter maps."""


class DegenerateBatchError(FedttaError):
    """Batch too small for the requested statistic (needs >= 2 samples)."""


class UnsupportedLossError(FedttaError):
    """Loss configuration outside the registered differentiable set."""


class NumericError(FedttaError):
    """Non-finite values where finite numbers are required."""


class InvalidDistributionError(FedttaError):
    """Probability rows that do not normalize or leave [0, 1]."""


class InsufficientDataError(FedttaError):
    """Dataset generation or partitioning asked for more than is available."""


class ConfigError(FedttaError):
    """Invalid or inconsistent configuration values."""


class IngestError(FedttaError):
    """External file ingestion failure; message names the offending field."""


class ProtocolError(FedttaError):
    """Federation round-loop contract violation (e.g. empty delta map)."""


class AttackerDataError(FedttaError):
    """Attacker operation missing data it is entitled to (e.g. own labels)."""


class SurrogateNotReady(FedttaError):
    """Signal: the surrogate history is too short to estimate anything.

    Not a failure; attacker code catches this and behaves benignly.
    """
