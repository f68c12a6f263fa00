"""Exception hierarchy shared by every ppls module."""


class PPLSError(Exception):
    """Base class for all errors raised by ppls."""


class DegenerateColumns(PPLSError):
    pass


class NotPositiveDefinite(PPLSError):
    pass


class NearDegenerateComponents(PPLSError):
    pass


class NonSquareCrossBlock(PPLSError):
    pass


class ZeroVariance(PPLSError):
    pass


class RankDeficient(PPLSError):
    pass


class NegativeVariance(PPLSError):
    pass


class NonFiniteLikelihood(PPLSError):
    pass


class ComponentOutOfRange(PPLSError):
    pass


class TooManyFailedReplicates(PPLSError):
    pass


class DimensionMismatch(PPLSError, ValueError):
    pass
