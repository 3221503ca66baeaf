"""Exception types raised across the package.

Every error carries a ``kind`` string (the class name unless overridden)
which the CLI reports in its machine-readable error payload.
"""


class P2IError(Exception):
    kind = "P2IError"

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if "kind" not in cls.__dict__:
            cls.kind = cls.__name__


class InvalidConfig(P2IError, ValueError):
    pass


# prediction vectors
class InvalidPrediction(P2IError, ValueError):
    pass


class NegativeEntry(InvalidPrediction):
    pass


class SumNotOne(InvalidPrediction):
    pass


class WrongLength(InvalidPrediction):
    pass


# target gateway
class InvalidModelOutput(P2IError, ValueError):
    pass


class EmptyBatch(P2IError, ValueError):
    pass


class NonPositiveEpsilon(P2IError, ValueError):
    pass


# benchmark
class SpecTooSmall(P2IError, ValueError):
    pass


class ShapeMismatch(P2IError, ValueError):
    pass


class SingleClassData(P2IError, ValueError):
    pass


# selection / training
class ClassCountMismatch(P2IError, ValueError):
    pass


class EmptyTrainingSet(P2IError, ValueError):
    pass


class ManifestMismatch(P2IError, ValueError):
    pass


class CheckpointIOError(P2IError, OSError):
    kind = "IoError"


class MissingCheckpoint(P2IError, FileNotFoundError):
    pass


class ConfigMismatch(P2IError, ValueError):
    pass


class OutputExists(P2IError, FileExistsError):
    pass


class MissingInput(P2IError, FileNotFoundError):
    pass


# losses
class ZeroVectorAtTap(P2IError, ValueError):
    pass


# attack
class EnhancementTooLarge(P2IError, ValueError):
    pass


class DegenerateOneHot(P2IError, ValueError):
    pass


class EmptyEnsemble(P2IError, ValueError):
    pass


class NoContributors(P2IError, ValueError):
    pass


# evaluation
class EmptyResults(P2IError, ValueError):
    pass


class MissingIdentityFeatures(P2IError, KeyError):
    pass


class MissingReference(P2IError, KeyError):
    pass


class StepsTooFew(P2IError, ValueError):
    pass


class TargetAlreadySaturated(P2IError, ValueError):
    pass
