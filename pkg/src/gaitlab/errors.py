"""Exception hierarchy. Every domain error raised by gaitlab derives from GaitLabError."""


class GaitLabError(Exception):
    """Base class; .name is the stable error identifier used by the CLI."""

    @property
    def name(self) -> str:
        return type(self).__name__


# -- sequence / feature ingestion ------------------------------------

class MalformedRecord(GaitLabError):
    pass


class WrongDimension(GaitLabError):
    pass


class EmptySequence(GaitLabError):
    pass


class HeaderMismatch(GaitLabError):
    pass


class NonFiniteValue(GaitLabError):
    pass


# -- tokenizer --------------------------------------------------------

class UnknownChannel(GaitLabError):
    pass


class MissingClassDefinition(GaitLabError):
    pass


# -- gait metrics ------------------------------------------------------

class MissingChannel(GaitLabError):
    pass


class TooShort(GaitLabError):
    pass


class DegenerateTiming(GaitLabError):
    pass


class UnknownClass(GaitLabError):
    pass


# -- tensor / model ----------------------------------------------------

class ShapeMismatch(GaitLabError):
    pass


class HeadDivisibility(GaitLabError):
    pass


class NonScalarOutput(GaitLabError):
    pass


class InvalidConfig(GaitLabError):
    pass


class TooManyFrames(GaitLabError):
    pass


class MissingForwardState(GaitLabError):
    pass


class EmptyClass(GaitLabError):
    pass


class BadLabel(GaitLabError):
    pass


# -- trainer / datasets --------------------------------------------------

class EmptySplit(GaitLabError):
    pass


class ClassMismatch(GaitLabError):
    pass


class SingleSubject(GaitLabError):
    pass


class EmptyManifest(GaitLabError):
    pass


class InvalidSpec(GaitLabError):
    pass


# -- evaluation statistics ------------------------------------------------

class EmptyMatrix(GaitLabError):
    pass


class InvalidParams(GaitLabError):
    pass


class EmptyStudy(GaitLabError):
    pass


# -- review service ---------------------------------------------------------

class MissingRationale(GaitLabError):
    pass


class NoRaters(GaitLabError):
    pass


class StudyComplete(GaitLabError):
    pass


class UnknownRater(GaitLabError):
    pass


class DuplicateRating(GaitLabError):
    pass


class IncompleteScores(GaitLabError):
    pass


class WrongCase(GaitLabError):
    pass
