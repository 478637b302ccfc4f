"""Set-membership learning and adaptive tube-based predictive control for
linear systems with bounded disturbances."""

__version__ = "0.1.0"
