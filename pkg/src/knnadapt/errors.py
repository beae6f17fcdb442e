"""Exception hierarchy shared by all knnadapt modules."""


class KnnAdaptError(Exception):
    """Base class for all toolkit errors."""


class ZeroMass(KnnAdaptError):
    """Score vector cannot be normalized (non-positive or non-finite mass)."""


class IndexOutOfRange(KnnAdaptError):
    """Token id falls outside the vocabulary."""


class DimensionMismatch(KnnAdaptError):
    """Embedding or distribution length disagrees with the configured size."""


class EmptyInput(KnnAdaptError):
    """An operation that requires at least one element received none."""


class KTooLarge(KnnAdaptError):
    """Requested more neighbors than the datastore holds."""


class FormatError(KnnAdaptError):
    """Base class for on-disk format problems (CLI exit code 3)."""


class FormatVersionMismatch(FormatError):
    """File declares an unsupported format version or inconsistent header."""


class Corrupt(FormatError):
    """File is truncated, has a bad magic, or fails its checksum."""


class TemperatureArityMismatch(KnnAdaptError):
    """Neighbor-wise temperature vector length disagrees with the neighbor count."""


class TokenOutOfRange(KnnAdaptError):
    """A neighbor or corpus token id is not a valid vocabulary id."""


class MissingContext(KnnAdaptError):
    """Context-aware interpolation invoked without a context embedding."""


class MissingW(KnnAdaptError):
    """Context-aware interpolation invoked without the token embedding matrix."""


class MassExceedsOne(KnnAdaptError):
    """Top-q probabilities sum to more than one beyond tolerance."""


class DegenerateInput(KnnAdaptError):
    """Correlation is undefined because one input is constant."""


class ArityMismatch(KnnAdaptError):
    """Parameter arities are inconsistent with the requested variant."""


class NonFiniteLoss(KnnAdaptError):
    """Training produced a non-finite loss or gradient."""


class EmptyCorpus(KnnAdaptError):
    """Cannot fit a model on an empty corpus."""


class EmptyContext(KnnAdaptError):
    """Cannot embed an empty token sequence."""


class ConsistencyViolation(KnnAdaptError):
    """Records disagree with their declared header."""
