"""Exception types shared across the package.

Each error carries a short machine-readable ``code`` so the CLI can report
structured failures and pick an exit status.
"""


class SclabError(Exception):
    code = "error"

    def __init__(self, message="", **details):
        super().__init__(f"{self.code}: {message}" if message else self.code)
        self.details = details


class NumericalOverflowError(SclabError, ArithmeticError):
    code = "numerical-overflow"


class DomainError(SclabError, ValueError):
    code = "domain"


class DivergedError(SclabError, ArithmeticError):
    code = "diverged"


class SGLDDivergedError(DivergedError):
    code = "sgld-diverged"


class TrainingDivergedError(DivergedError):
    code = "training-diverged"

    def __init__(self, message="", params=None, log=None, **details):
        super().__init__(message, **details)
        self.params = params
        self.log = log


class EmptyBatchError(SclabError, ValueError):
    code = "empty-batch"


class UnlabeledError(SclabError, ValueError):
    def __init__(self, code, message=""):
        self.code = code
        super().__init__(message)


class NoLabeledDataError(SclabError, ValueError):
    code = "no-labeled-data"


class SingularCovarianceError(SclabError, ValueError):
    code = "singular-covariance"


class GridMismatchError(SclabError, ValueError):
    code = "grid-mismatch"


class InsufficientSamplesError(SclabError, ValueError):
    code = "insufficient-samples"


class KTooLargeError(SclabError, ValueError):
    code = "k-too-large"


class EmptyTestSetError(SclabError, ValueError):
    code = "empty-test-set"


class ParseError(SclabError, ValueError):
    code = "parse-error"

    def __init__(self, message="", line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message,
                         line=line)
        self.line = line


class ConfigError(SclabError, ValueError):
    code = "config"
