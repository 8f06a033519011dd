"""Exception hierarchy.

Every error raised by the library derives from ``OutlierFreeError`` so callers
(and the CLI) can separate domain failures from programming mistakes.
"""


class OutlierFreeError(Exception):
    pass


class ShapeMismatch(OutlierFreeError, ValueError):
    pass


class NonFiniteInput(OutlierFreeError, ValueError):
    pass


class EmptyTensor(OutlierFreeError, ValueError):
    pass


class NonConvergence(OutlierFreeError, ArithmeticError):
    pass


class Singular(OutlierFreeError, ArithmeticError):
    pass


class IndexOutOfRange(OutlierFreeError, IndexError):
    pass


class ConfigError(OutlierFreeError, ValueError):
    pass


class TokenOutOfRange(OutlierFreeError, ValueError):
    pass


class SequenceTooLong(OutlierFreeError, ValueError):
    pass


class EmptyInput(OutlierFreeError, ValueError):
    pass


class DegenerateSample(OutlierFreeError, ArithmeticError):
    pass


class InvalidBits(OutlierFreeError, ValueError):
    pass


class ZeroRange(OutlierFreeError, ValueError):
    pass


class EmptySample(OutlierFreeError, ValueError):
    pass


class AlphaOutOfRange(OutlierFreeError, ValueError):
    pass


class MissingStats(OutlierFreeError, KeyError):
    pass


class ConfigMismatch(OutlierFreeError, ValueError):
    pass


class NonSingularityViolated(OutlierFreeError, ArithmeticError):
    pass


class RankConditionViolated(OutlierFreeError, ValueError):
    pass


class TargetMissing(OutlierFreeError, KeyError):
    pass


class EmptyCorpus(OutlierFreeError, ValueError):
    pass


class InvalidCharacter(OutlierFreeError, ValueError):
    pass


class UnknownId(OutlierFreeError, KeyError):
    pass


class NoMaskedPositions(OutlierFreeError, ValueError):
    pass


class AlreadyOutlierFree(OutlierFreeError, ValueError):
    pass


class SingleClassDataset(OutlierFreeError, ValueError):
    pass


class CheckpointError(OutlierFreeError, IOError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionUnsupported(CheckpointError):
    pass


class CorruptManifest(CheckpointError):
    pass
