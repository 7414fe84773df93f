"""Exception hierarchy.

Every error carries a short machine-readable ``kind`` which the CLI emits in
its single-line error record.
"""


class DepPruneError(Exception):
    kind = "error"


class ShapeError(DepPruneError, ValueError):
    kind = "shape"


class ContractError(DepPruneError, RuntimeError):
    kind = "contract"


class ConfigError(DepPruneError, ValueError):
    kind = "config"


class DataError(DepPruneError, ValueError):
    kind = "data"


class LengthError(DepPruneError, ValueError):
    kind = "length"


class TokenIndexError(DepPruneError, IndexError):
    kind = "index"


class SelectionError(DepPruneError, ValueError):
    kind = "selection"

    def __init__(self, message, achievable=None):
        super().__init__(message)
        self.achievable = achievable


class PlanStaleError(DepPruneError, ValueError):
    kind = "plan_stale"


class IntegrityError(DepPruneError, ValueError):
    kind = "integrity"


class VersionError(DepPruneError, ValueError):
    kind = "version"


class DependencyError(DepPruneError, FileNotFoundError):
    """A required input artifact is missing; names the producing subcommand."""

    kind = "dependency"

    def __init__(self, artifact, producer):
        super().__init__(f"missing artifact {artifact!s}; run `{producer}` first")
        self.artifact = str(artifact)
        self.producer = producer


class UndefinedCorrelationError(DepPruneError, ValueError):
    kind = "undefined_correlation"


class DigestError(DepPruneError, ValueError):
    """Artifacts produced under different model configurations were mixed."""

    kind = "digest"
