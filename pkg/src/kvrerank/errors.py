"""Exception types shared across the package."""


class KvRerankError(Exception):
    """Base class for all package errors."""


class ConfigError(KvRerankError):
    """A configuration violates its invariants."""


class ShapeError(KvRerankError):
    """Tensor or layout dimensions do not match."""


class PositionError(KvRerankError):
    """A token position falls outside the model's position range."""


class DegenerateInputError(KvRerankError):
    """Input carries no usable (non-pad) tokens."""


class CodecError(KvRerankError):
    """Encoding or decoding a cache entry failed."""


class FormatError(CodecError):
    """Entry bytes do not start with a supported header."""


class StoreError(KvRerankError):
    """A storage backend operation failed (transport or I/O)."""


class DuplicateChunkError(KvRerankError):
    """A chunk id was added to the index twice."""
