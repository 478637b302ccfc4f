"""Exception types shared across the library."""


class AdpcError(Exception):
    """Base class for all library errors."""


class NotPositiveDefinite(AdpcError):
    """A matrix required to be positive definite is not."""


class DegenerateSet(AdpcError):
    """The ellipsoid is degenerate: F'E^-1 F - G is not positive definite."""


class SlaterViolated(AdpcError):
    """The supplied point does not satisfy the strict QMI inequality."""


class NotAnAse(AdpcError):
    """H Lambda H' is not positive definite, so the data set is not an ASE."""


class FormationStalled(AdpcError):
    """The formation phase failed to collect n_h samples within the step cap."""


class CriterionNotMet(AdpcError):
    """The contraction criterion m > n_h/tr(Lambda) does not hold."""


class SingularMatrix(AdpcError):
    """A projection residual vanished; the matrix is numerically singular."""


class Infeasible(AdpcError):
    """A semidefinite program reported infeasibility."""


class TubeDiverges(AdpcError):
    """The error-tube contraction factor is >= 1."""


class EmptyTerminalSet(AdpcError):
    """Constraint tightening leaves no room for a terminal set."""


class OcpInfeasible(AdpcError):
    """The tightened finite-horizon problem has no feasible plan."""


class ConfigError(AdpcError):
    """An experiment configuration file is missing or malformed."""
