class PseudoflowError(Exception):
    pass


class DimensionError(PseudoflowError, ValueError):
    """Tensor or descriptor widths do not line up."""


class ContractError(PseudoflowError, ValueError):
    """An operation was called outside its preconditions."""


class QueryError(PseudoflowError, ValueError):
    """A neighbor query cannot be answered (e.g. k larger than the cloud)."""


class TrainingError(PseudoflowError, FloatingPointError):
    """Non-finite values appeared during optimisation."""


class FormatError(PseudoflowError, ValueError):
    """A binary or text artifact is malformed or mismatched."""
