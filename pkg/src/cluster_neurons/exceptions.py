"""Exception hierarchy shared by every stage of the toolkit."""


class ClusterNeuronsError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this error."""

    exit_code = 1
    kind = "error"


class FormatError(ClusterNeuronsError):
    exit_code = 4
    kind = "format"


class ManifestError(ClusterNeuronsError):
    exit_code = 4
    kind = "manifest"


class DataError(ClusterNeuronsError):
    exit_code = 4
    kind = "data"


class ValidationError(ClusterNeuronsError):
    exit_code = 4
    kind = "validation"


class ReportError(ClusterNeuronsError):
    exit_code = 4
    kind = "report"


class ParameterError(ClusterNeuronsError, ValueError):
    exit_code = 5
    kind = "parameter"


class BudgetConflictError(ClusterNeuronsError):
    exit_code = 6
    kind = "budget_conflict"


class InputNotFoundError(ClusterNeuronsError, FileNotFoundError):
    exit_code = 3
    kind = "input_not_found"
