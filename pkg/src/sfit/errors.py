"""Exception types raised across the package.

Every error derives from :class:`SfitError` so the CLI can map any library
failure to exit code 1 with a readable message.
"""


class SfitError(Exception):
    """Base class for all library errors."""


# data / file formats
class BadMagic(SfitError):
    pass


class CountMismatch(SfitError):
    pass


class TruncatedFile(SfitError):
    pass


class IncompatibleChannels(SfitError):
    pass


class EmptySplit(SfitError):
    pass


class BatchTooLarge(SfitError):
    pass


# models / checkpoints
class ShapeMismatch(SfitError):
    pass


class VersionUnsupported(SfitError):
    pass


class MissingTensor(SfitError):
    pass


class UnknownTensor(SfitError):
    pass


# losses
class NonDistribution(SfitError):
    pass


class IndexOutOfRange(SfitError):
    pass


class EmptyBatch(SfitError):
    pass


class LayerCountMismatch(SfitError):
    pass


# pipelines / eval
class UnlabeledData(SfitError):
    pass


class HeadMismatch(SfitError):
    pass


class FrozenModelViolation(SfitError):
    pass


class SizeMismatch(SfitError):
    pass


class ConfigError(SfitError):
    pass
