"""Exception hierarchy.

Data problems (bad input files, degenerate covariates) derive from
:class:`DataError`; failures of the estimators themselves derive from
:class:`EstimationError`. The CLI maps the two families to distinct exit codes.
"""

from __future__ import annotations


class ComonoError(Exception):
    """Base class for every error raised by this package."""


class DataError(ComonoError):
    pass


class EstimationError(ComonoError):
    pass


class MissingColumn(DataError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"missing column {column!r}")


class NonNumericCell(DataError):
    def __init__(self, row: int, column: str, value: str):
        self.row = row
        self.column = column
        super().__init__(f"non-numeric cell at row {row}, column {column!r}: {value!r}")


class NonBinaryTreatment(DataError):
    def __init__(self, row: int, value: float):
        self.row = row
        super().__init__(f"treatment at row {row} is {value!r}, expected 0 or 1")


class EmptyGroup(DataError):
    def __init__(self, group: int):
        self.group = group
        super().__init__(f"treatment group d={group} has no observations")


class DegenerateCovariate(DataError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"covariate {column!r} has zero variance")


class InvalidCovariance(ComonoError, ValueError):
    pass


class InsufficientSupport(EstimationError):
    def __init__(self, where, effective_n: int | None = None):
        self.where = where
        self.effective_n = effective_n
        msg = f"insufficient local support at {where}"
        if effective_n is not None:
            msg += f" (effective_n={effective_n})"
        super().__init__(msg)


class AllCandidatesFailed(EstimationError):
    pass


class NoFrontierUnits(EstimationError):
    def __init__(self, counts: dict):
        self.counts = counts
        super().__init__(f"no near-frontier units in some group: {counts}")


class EmptyFrontierSample(EstimationError):
    pass


class NoIdentifiedUnits(EstimationError):
    pass


class TooFewPoints(EstimationError):
    pass


class BootstrapAborted(EstimationError):
    pass
