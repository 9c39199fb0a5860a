"""Exception hierarchy shared across the toolkit."""


class LnprobeError(Exception):
    """Base class for all toolkit errors."""


class CheckpointFormatError(LnprobeError):
    """Malformed, truncated, or inconsistent checkpoint file."""


class SchemaError(LnprobeError):
    """Missing template, unresolvable component, or shape mismatch."""


class PlanError(LnprobeError):
    """Invalid or inapplicable mask plan."""


class NumericError(LnprobeError):
    """Non-finite values or numerical failure during computation."""
