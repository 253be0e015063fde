"""Exception hierarchy.

``DataError`` covers anything wrong with input files or datasets and maps to
CLI exit code 2; ``ConfigError`` maps to exit code 1.
"""


class EnsembleForgeError(Exception):
    pass


class ConfigError(EnsembleForgeError, ValueError):
    pass


class DataError(EnsembleForgeError, ValueError):
    pass


# IDX parsing
class WrongMagic(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class TrailingBytes(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class CountMismatch(DataError):
    pass


class CountTooLarge(DataError):
    pass


class EmptyDataset(DataError):
    pass


class MeanOffsetMismatch(DataError):
    pass


# numerics / shapes
class ShapeMismatch(EnsembleForgeError, ValueError):
    pass


class NonPositiveScale(ConfigError):
    pass


class NonPositiveLearningRate(ConfigError):
    pass


class IndexOutOfRange(ConfigError):
    pass


class UnsortedIndices(ConfigError):
    pass


# ensembles
class EmptyEnsemble(EnsembleForgeError, ValueError):
    pass


class MixedVariants(EnsembleForgeError, ValueError):
    pass


class LabelCountMismatch(EnsembleForgeError, ValueError):
    pass


class UnknownModelId(ConfigError):
    pass
