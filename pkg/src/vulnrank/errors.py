"""Exception hierarchy.

Every error carries a short machine-readable ``code`` which the CLI prints
as a prefix before exiting with a nonzero status.
"""


class VulnRankError(Exception):
    code = "error"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class DataError(VulnRankError, ValueError):
    code = "data"


class DesignError(VulnRankError, ValueError):
    code = "design"


class SingularDesignError(DesignError):
    code = "singular-design"


class InsufficientDataError(DesignError):
    code = "insufficient-data"


class DimensionError(VulnRankError, ValueError):
    code = "dimension"


class EmptyCategoryError(VulnRankError, ValueError):
    code = "empty-category"


class SeparationError(VulnRankError, RuntimeError):
    code = "separation"


class EmptyNeighborhoodError(VulnRankError, ValueError):
    code = "empty-neighborhood"


class DegenerateResponseError(VulnRankError, ValueError):
    code = "degenerate-response"


class IngestError(VulnRankError, ValueError):
    code = "ingest"


class ConfigError(VulnRankError, ValueError):
    code = "config"
