"""Exception hierarchy shared by every stage of the pipeline."""


class UASortError(Exception):
    """Base class for all package errors."""


class ConfigError(UASortError, ValueError):
    """Invalid configuration or violated precondition on user input."""


class MissingColumnError(UASortError, KeyError):
    def __init__(self, column, path=None):
        self.column = column
        self.path = path
        where = f" in {path}" if path else ""
        super().__init__(f"missing required column {column!r}{where}")

    def __str__(self):
        return self.args[0]


class DataIntegrityError(UASortError, ValueError):
    """Duplicate keys or otherwise inconsistent records."""


class ParseError(UASortError, ValueError):
    def __init__(self, message, row=None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


class CoverageError(UASortError, ValueError):
    """A lookup table (macro, benchmark, factors) does not cover a required month."""


class InsufficientSpanError(UASortError, ValueError):
    def __init__(self, required, available):
        self.required = required
        self.available = available
        super().__init__(
            f"insufficient span: need {required} whole years, panel has {available}"
        )


class RankError(UASortError, ValueError):
    """Requested more components/regressors than the data can identify."""


class InsufficientPoolError(UASortError):
    """Residual pool too small for the requested half-width; callers fall back."""

    def __init__(self, n, n_min):
        self.n = n
        self.n_min = n_min
        super().__init__(f"pool has {n} residuals, need at least {n_min}")


class CollinearityError(UASortError, ValueError):
    def __init__(self, terms):
        self.terms = tuple(terms)
        super().__init__(
            "collinear regressors after within transformation: " + ", ".join(self.terms)
        )


class DegenerateVarianceError(UASortError, ValueError):
    pass


class StageError(UASortError):
    """Wraps a failure inside the backtest orchestration with its stage and key."""

    def __init__(self, stage, key, cause):
        self.stage = stage
        self.key = key
        self.cause = cause
        super().__init__(f"stage {stage!r} failed for {key}: {cause}")
