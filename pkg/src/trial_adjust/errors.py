"""Exception types raised by trial_adjust."""


class TrialAdjustError(Exception):
    """Base class for all package errors."""


class RankDeficient(TrialAdjustError, ValueError):
    """The (weighted) design matrix is not of full column rank."""


class SingularContrast(TrialAdjustError, ValueError):
    """A ratio or odds-ratio contrast was requested at a singular point."""


class NonPositiveVariance(TrialAdjustError, ValueError):
    pass


class DegenerateN(TrialAdjustError, ValueError):
    """Score interval undefined: ``1 - chi2_level / n <= 0``."""


class DegenerateSample(TrialAdjustError, ValueError):
    """Fewer than two observations for a sample variance."""


class OddN(TrialAdjustError, ValueError):
    """Balanced two-arm assignment needs an even sample size."""


class EmptyCell(TrialAdjustError, ValueError):
    """A simulation summary cell has no valid replicate."""


class SchemaError(TrialAdjustError, ValueError):
    pass


class MissingData(TrialAdjustError, ValueError):
    pass


class NonNumeric(TrialAdjustError, ValueError):
    pass


class ConfigError(TrialAdjustError, ValueError):
    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field
