"""Exception hierarchy shared across the package."""


class EvrecError(Exception):
    """Base class for all package errors."""


class OpinionError(EvrecError, ValueError):
    pass


class InvalidEvidence(OpinionError):
    pass


class ZeroUncertainty(OpinionError):
    """The evidence inverse is undefined for dogmatic opinions."""


class TotalConflict(OpinionError):
    """Dempster combination of fully conflicting masses."""


class DimensionMismatch(OpinionError):
    pass


class EmptySequence(OpinionError):
    pass


class FrameTooLarge(OpinionError):
    pass


class DomainError(EvrecError, ValueError):
    pass


class ShapeMismatch(EvrecError, ValueError):
    pass


class GenerationFailed(EvrecError, RuntimeError):
    def __init__(self, seed, reason="exhausted retries"):
        super().__init__(f"generation failed for seed {seed}: {reason}")
        self.seed = seed
        self.reason = reason


class RangeError(EvrecError, ValueError):
    pass


class ParseError(EvrecError, ValueError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class ChecksumMismatch(EvrecError, ValueError):
    pass


class NonFiniteLoss(EvrecError, FloatingPointError):
    def __init__(self, seed, where="loss"):
        super().__init__(f"non-finite {where} (minibatch seed {seed})")
        self.seed = seed


class StageDependencyError(EvrecError, RuntimeError):
    pass


class SchemaVersionError(EvrecError, ValueError):
    pass
