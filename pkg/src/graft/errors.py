"""Exception hierarchy for the refinement engine.

Every error the engine raises on bad input or bad state derives from
GraftError so the CLI can map them to exit code 1 with a machine-readable
payload.
"""


class GraftError(Exception):
    """Base class for all engine errors."""


class DegenerateRotation(GraftError):
    """6D rotation input with (near-)zero or (near-)parallel basis vectors."""


class DimensionMismatch(GraftError):
    """Human state dimensions do not match the body model."""


class NonPositiveScale(GraftError):
    """Uniform scale factor must be > 0."""


class RankDeficientBlendshapes(GraftError):
    """Shape blendshape rows are not linearly independent enough to invert."""


class EmptyCloud(GraftError):
    """Scene point cloud or spatial index contains no points."""


class TooFewPoints(GraftError):
    """Not enough points for the requested neighborhood size."""


class WeightShapeMismatch(GraftError):
    """A tensor in the weight container has the wrong shape for the architecture."""


class GridShapeMismatch(GraftError):
    """Visual feature grids are inconsistent with each other or the weights."""


class ShapeMismatch(GraftError):
    """Generic tensor shape violation inside the transformer."""


class LengthMismatch(GraftError):
    """Paired label/metric vectors have different lengths."""


class AllDegenerate(GraftError):
    """Every displacement vector was excluded as degenerate."""


class DegenerateConfiguration(GraftError):
    """Joint set too degenerate (too few / collinear) for Procrustes alignment."""


class HeadNotVisible(GraftError):
    """Head joint projects behind the camera or outside the image."""


class NoScenePointOnRay(GraftError):
    """No scene point lies within the angular tolerance of the head ray."""


class NonFiniteLoss(GraftError):
    """Training loss became NaN/Inf; aborting with diagnostics."""


class ContainerFormatError(GraftError):
    """Malformed tensor container file."""


class SceneFormatError(GraftError):
    """Malformed scene (PLY) file."""


class StateDocumentError(GraftError):
    """Malformed human-state JSON document."""


class UnknownLayout(GraftError):
    """Input archive layout could not be detected."""


class MissingTensor(GraftError):
    """A mandatory tensor is absent from an archive or container."""
