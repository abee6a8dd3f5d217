"""Exception taxonomy shared across the toolkit.

Every error raised on purpose derives from :class:`MorphDistillError`, so
callers (and the CLI) can catch one base class and exit nonzero.
"""


class MorphDistillError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MorphDistillError):
    """Invalid or inconsistent configuration."""


class ShapeError(MorphDistillError):
    """Array shapes incompatible with the requested operation."""


class ShapeMismatchError(ShapeError):
    """Row counts or sample-id orderings disagree between aligned inputs."""


class ZeroVectorError(MorphDistillError):
    """An embedding row has (numerically) zero norm; upstream corruption."""


class BatchTooSmallError(MorphDistillError):
    """Relational/contrastive operations need at least two samples."""


class InvalidTemperatureError(MorphDistillError):
    """Softmax temperature must be strictly positive."""


class NoPositivePairsError(MorphDistillError):
    """Every anchor in the batch has an empty positive set."""


class FormatError(MorphDistillError):
    """Embedding file has a bad magic string or unsupported version."""


class IntegrityError(MorphDistillError):
    """Embedding file is truncated or fails its checksum."""


class NonFiniteError(MorphDistillError):
    """NaN or infinity found where finite values are required."""


class MissingSampleError(MorphDistillError):
    """A requested sample id is absent from a teacher store."""


class MissingCovariateError(MorphDistillError):
    """A requested covariate key is absent from patient records."""


class DivergenceError(MorphDistillError):
    """Training loss became non-finite."""


class DegenerateLabelsError(MorphDistillError):
    """A metric is undefined because a label class is missing."""


class NoComparablePairsError(MorphDistillError):
    """Concordance is undefined: no comparable pair exists."""


class NoEventsError(MorphDistillError):
    """Survival statistic undefined without any observed event."""


class DegenerateCovariateError(MorphDistillError):
    """Cox covariate is constant; the partial likelihood is flat."""


class NonConvergenceError(MorphDistillError):
    """Cox Newton iteration failed to converge (e.g. monotone likelihood)."""


class EmptyInputError(MorphDistillError):
    """An operation received an empty collection it cannot act on."""


class UnknownSubgroupError(MorphDistillError):
    """A subgroup key is absent from the given records."""
