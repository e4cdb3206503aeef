"""Error types raised by the msfa package.

Every class carries a short ``category`` string so that the command line
front end can print a machine-parsable prefix.
"""


class MsfaError(Exception):
    category = "error"


class FeasibilityError(MsfaError, ValueError):
    """Factor dimensions violate the identifiability/counting constraints."""

    category = "feasibility"


class PreconditionError(MsfaError, ValueError):
    category = "precondition"


class NumericError(MsfaError, ArithmeticError):
    """A covariance matrix or CM system could not be factorized."""

    category = "numeric"


class FormatError(MsfaError, ValueError):
    """Malformed or tampered on-disk artifact."""

    category = "format"
