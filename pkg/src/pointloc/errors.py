"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 2,
``DataFormatError`` -> 3, ``AlgorithmError`` -> 4.
"""


class PointLocError(Exception):
    """Base class for every error raised by pointloc."""


class ConfigError(PointLocError):
    pass


class DataFormatError(PointLocError):
    pass


class FormatError(DataFormatError):
    """Bad magic number, unsupported version or malformed header."""


class TruncatedFile(DataFormatError):
    pass


class DimensionChainBroken(DataFormatError):
    """Adjacent MLP layers do not agree on their shared dimension."""


class DimensionMismatch(PointLocError, ValueError):
    pass


class AlgorithmError(PointLocError):
    pass


class OutOfFrame(AlgorithmError, ValueError):
    pass


class EmptySubmap(AlgorithmError):
    pass


class KTooLarge(AlgorithmError, ValueError):
    pass


class NoCorrespondences(AlgorithmError):
    pass


class BudgetExceeded(AlgorithmError):
    pass


class DegenerateDepth(AlgorithmError):
    pass


class DegenerateConfiguration(AlgorithmError):
    pass


class NoConsensus(AlgorithmError):
    pass


class SingularNormalEquations(AlgorithmError):
    """Raised only when no usable step exists; carries the best pose so far."""

    def __init__(self, message, pose=None):
        super().__init__(message)
        self.pose = pose


class ProposalDegenerate(AlgorithmError):
    pass


class NegativeTooClose(AlgorithmError, ValueError):
    pass


class EmptyResults(AlgorithmError, ValueError):
    pass


class ZeroProbabilityWarning(RuntimeWarning):
    pass


class ProposalFallbackWarning(RuntimeWarning):
    pass
