"""Exception taxonomy shared by every subsystem.

Each failure mode documented on an operation gets its own class so callers
can catch precisely; everything derives from :class:`AffordKitError`.
"""


class AffordKitError(Exception):
    """Base class for all toolkit errors."""


# --- tensor / image file formats -------------------------------------------

class TensorFormatError(AffordKitError):
    """Base for binary tensor (.rft) format violations."""


class BadMagic(TensorFormatError):
    pass


class UnsupportedVersion(TensorFormatError):
    pass


class TruncatedPayload(TensorFormatError):
    pass


class NonFiniteValue(TensorFormatError):
    pass


class ShapeRejected(TensorFormatError):
    pass


class IoFailure(AffordKitError):
    pass


class WrongChannelCount(AffordKitError):
    pass


class DecodeFailure(AffordKitError):
    pass


class ParseFailure(AffordKitError):
    pass


# --- extraction --------------------------------------------------------------

class ExtractionError(AffordKitError):
    pass


class NoContactFrame(ExtractionError):
    pass


class NoIntersection(ExtractionError):
    pass


class NoSkinPixels(ExtractionError):
    pass


class EmptyImage(ExtractionError):
    pass


class TooFewMatches(ExtractionError):
    pass


class DegenerateConfiguration(ExtractionError):
    pass


class NoConsensus(ExtractionError):
    pass


class AllPointsOutOfBounds(ExtractionError):
    pass


class EmptyCrop(ExtractionError):
    pass


class AllPointsOutsideBbox(ExtractionError):
    pass


# --- memory ------------------------------------------------------------------

class MemoryError_(AffordKitError):
    """Affordance memory failure (trailing underscore avoids the builtin)."""


class DuplicateId(MemoryError_):
    pass


class MemoryInconsistent(MemoryError_):
    pass


# --- retrieval ---------------------------------------------------------------

class RetrievalError(AffordKitError):
    pass


class DimensionMismatch(RetrievalError):
    pass


class ZeroNormVector(RetrievalError):
    pass


class EmptyMemory(RetrievalError):
    pass


# --- correspondence ----------------------------------------------------------

class CorrespondenceError(AffordKitError):
    pass


class OutOfBounds(CorrespondenceError):
    pass


class ZeroFeature(CorrespondenceError):
    pass


class MissingFeatureFile(CorrespondenceError):
    pass


class AllSourcesFailed(CorrespondenceError):
    pass


# --- evaluation ---------------------------------------------------------------

class EvaluationError(AffordKitError):
    pass


class EmptyPrediction(EvaluationError):
    pass


class EmptyMaskRegion(EvaluationError):
    pass


class MissingMask(EvaluationError):
    pass


class MissingPrediction(EvaluationError):
    pass


class InvalidPrediction(EvaluationError):
    pass


# --- grasp ---------------------------------------------------------------------

class GraspError(AffordKitError):
    pass


class ZeroDepth(GraspError):
    pass


class EmptyCandidateSet(GraspError):
    pass


class NonOrthonormalRotation(GraspError):
    pass


class SelectionTooFar(GraspError):
    pass
