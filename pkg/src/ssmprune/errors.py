"""Exception types raised across the toolkit.

Everything derives from :class:`SSMPruneError` so the CLI can map data and
contract failures to a single exit code.
"""


class SSMPruneError(Exception):
    pass


class DimensionError(SSMPruneError, ValueError):
    pass


class NumericError(SSMPruneError, ArithmeticError):
    pass


class CheckpointError(SSMPruneError, ValueError):
    pass


class CalibrationError(SSMPruneError, ValueError):
    pass


class PlanError(SSMPruneError, ValueError):
    pass
