"""Exception hierarchy.

Every error carries a short ``category`` string; the command-line front end
prints it as the machine-parsable part of its one-line failure message.
"""


class NdfError(Exception):
    category = "NdfError"


class ParseError(NdfError):
    category = "ParseError"


class EmptyMesh(NdfError):
    category = "EmptyMesh"


class DegenerateExtent(NdfError):
    category = "DegenerateExtent"


class NotWatertight(NdfError):
    category = "NotWatertight"


class BalanceFailure(NdfError):
    category = "BalanceFailure"


class BadParams(NdfError):
    category = "BadParams"


class EmptySurface(NdfError):
    category = "EmptySurface"


class ShapeMismatch(NdfError, ValueError):
    category = "ShapeMismatch"


class NonScalarLoss(NdfError):
    category = "NonScalarLoss"


class TimeOutOfRange(NdfError, ValueError):
    category = "TimeOutOfRange"


class StepBudgetExceeded(NdfError):
    category = "StepBudgetExceeded"


class NonFiniteState(NdfError):
    category = "NonFiniteState"


class NonFiniteLoss(NdfError):
    category = "NonFiniteLoss"


class ClusterCollapse(NdfError):
    category = "ClusterCollapse"


class NoLabels(NdfError):
    category = "NoLabels"


class CountMismatch(NdfError, ValueError):
    category = "CountMismatch"


class IoError(NdfError):
    category = "IoError"


class ConfigError(NdfError):
    category = "ConfigError"
