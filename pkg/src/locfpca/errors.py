"""Exception and warning types raised across the package."""


class LocfpcaError(ValueError):
    """Base class for all input/contract violations."""


class MissingCell(LocfpcaError):
    """A (subject, replicate, variate, time) combination is absent."""


class DuplicateCell(LocfpcaError):
    """A (subject, replicate, variate, time) combination appears twice."""


class NonFiniteValue(LocfpcaError):
    """A NaN or infinite observation was encountered."""


class AlreadyDemeaned(LocfpcaError):
    """Demeaning requested on data that is already demeaned."""


class DegenerateGrid(LocfpcaError):
    """Too few time points for the requested operation."""


class NeedsTwoSubjects(LocfpcaError):
    """Covariance estimation requires at least two subjects."""


class NeedsTwoReplicates(LocfpcaError):
    """Within-subject estimation requires at least two replicates."""


class EmptyDeltaSet(LocfpcaError):
    """The dissociation threshold selected no replicate pairs."""


class DegenerateDenominator(LocfpcaError):
    """The pooled dissociation total is non-positive."""


class InfeasibleDeflation(LocfpcaError):
    """The deflation projection leaves no direction to optimize over."""


class SingularSystem(LocfpcaError):
    """The score prediction system is rank-deficient with zero noise."""


class RankMismatch(LocfpcaError):
    """Estimated and true component counts differ."""


class NotPSD(LocfpcaError):
    """A correlation specification is not positive semidefinite."""


class FoldTooSmall(LocfpcaError):
    """A cross-validation fold has too few subjects for estimation."""


class ConfigError(LocfpcaError):
    """Invalid run configuration (unknown key or bad value)."""


class NotConvergedWarning(RuntimeWarning):
    """The consensus solver hit its iteration cap before the tolerance."""


class NoFeasiblePairWarning(UserWarning):
    """Only the unpenalized candidate met the variance-retention floor."""
