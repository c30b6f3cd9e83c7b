"""Exception hierarchy.

Every error raised by the library derives from :class:`FlowcastError`.  The
two intermediate classes decide the CLI exit code: :class:`ValidationError`
maps to 2, :class:`EstimationError` to 3.
"""


class FlowcastError(Exception):
    """Base class for all library errors."""


class ValidationError(FlowcastError):
    """Input data or configuration is malformed."""


class EstimationError(FlowcastError):
    """A numerical fit failed to produce a usable estimate."""


# -- data_model ------------------------------------------------------------

class RowError(ValidationError):
    """Validation error tied to one line of an input file."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class MissingColumn(RowError):
    pass


class NegativeCount(RowError):
    pass


class NonIntegerCount(RowError):
    pass


class DuplicateStation(RowError):
    pass


class ElectorateExceeded(RowError):
    pass


class UnmappedLabel(ValidationError):
    pass


class ZeroElectorate(ValidationError):
    pass


class ElectorateMismatch(ValidationError):
    pass


class MinStations(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class OptionMismatch(ValidationError):
    pass


# -- ei_estimator ----------------------------------------------------------

class DegenerateOption(ValidationError):
    pass


class InfeasibleMargins(ValidationError):
    pass


class NotConverged(EstimationError):
    pass


class NoConvergence(EstimationError):
    pass


class SingularInformation(EstimationError):
    pass


class NonPSDCovariance(EstimationError):
    pass


# -- covariate_lab ---------------------------------------------------------

class ZeroVariance(ValidationError):
    pass


class PerfectCollinearity(ValidationError):
    pass


class ZeroDenominator(ValidationError):
    pass


class UnknownZone(ValidationError):
    pass


# -- transition_mnl --------------------------------------------------------

class MissingAnchor(ValidationError):
    pass


class Separation(EstimationError):
    pass


class RankDeficientDesign(EstimationError):
    pass


# -- volatility ------------------------------------------------------------

class MissingAbstention(ValidationError):
    pass


class ZeroRowTotal(ValidationError):
    pass


# -- synth_oracle / cli ----------------------------------------------------

class InvalidSpec(ValidationError):
    pass


class UnknownCell(ValidationError):
    pass


class ConfigError(ValidationError):
    pass
