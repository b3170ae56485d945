"""Exception types shared across the pipeline."""


class ProtomatchError(Exception):
    """Base class for all library errors."""


class FormatError(ProtomatchError):
    """Malformed or truncated embedding / pair file."""


class EmptyCorpusError(ProtomatchError):
    """Embedding file declares zero rows or zero dimensions."""


class DegenerateVectorError(ProtomatchError):
    """A vector that cannot be normalized (zero norm)."""


class ReferentialIntegrityError(ProtomatchError):
    """Pairing relation references unknown instances or leaves one unpaired."""


class ParameterError(ProtomatchError):
    """Out-of-range algorithm parameter (k, eps, min_pts, ...)."""


class EmptyMemoryError(ProtomatchError):
    """Prototype memory initialization with zero clusters."""


class EmptyBatchError(ProtomatchError):
    """A loss was asked to run on a batch with no usable items."""


class DegenerateMatchError(ProtomatchError):
    """A match matrix row or column has no positive entry."""


class EvalWithoutTruthError(ProtomatchError):
    """Retrieval evaluation requested on a corpus without ground truth."""


class NonFiniteGradientError(ProtomatchError):
    """A gradient tensor contains NaN or Inf."""


class DegenerateEpochError(ProtomatchError):
    """An epoch produced zero usable batches in both training stages."""
