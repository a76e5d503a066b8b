class HierPoseError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(HierPoseError, ValueError):
    """An argument violates an operation's precondition (shape, scheme, domain)."""


class AnnotationError(HierPoseError, ValueError):
    """An annotation file or record could not be parsed or validated."""


class SceneGenerationError(HierPoseError, RuntimeError):
    """A synthetic scene could not be generated under the requested constraints."""


class TensorFormatError(HierPoseError, ValueError):
    """A binary tensor dump is malformed."""
