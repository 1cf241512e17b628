"""Domain error hierarchy.

Every failure the library raises on purpose derives from ProcapError so the
CLI can map domain errors to exit code 1 and leave genuine bugs loud.
"""


class ProcapError(Exception):
    """Base class for all domain errors."""


class DimensionMismatch(ProcapError):
    pass


class NonInvertibleHomography(ProcapError):
    pass


class IoFailure(ProcapError):
    pass


class EmptyCorpus(ProcapError):
    pass


class SchemaViolation(ProcapError):
    pass


class MissingFile(ProcapError):
    pass


class MaskNotBinary(ProcapError):
    pass


class EmptyRefs(ProcapError):
    pass


class CheckpointLoadFailure(ProcapError):
    pass


class EmptyKnowledgeBase(ProcapError):
    pass


class NormViolation(ProcapError):
    pass


class NonFiniteLoss(ProcapError):
    pass


class NonFinite(ProcapError):
    pass


class StepOutOfRange(ProcapError):
    pass


class ShapeMismatch(ProcapError):
    pass


class EmptySequence(ProcapError):
    pass


class CorpusTooSmall(ProcapError):
    pass


class EmptyEvalSplit(ProcapError):
    pass
