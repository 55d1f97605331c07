"""Exception types shared across the codec."""


class SparseVoxError(Exception):
    """Base class for every error raised by this package."""


class PlyError(SparseVoxError):
    """Malformed or unsupported PLY input."""


class CorruptBitstreamError(SparseVoxError):
    """Bitstream or payload that cannot be decoded."""


class ModelMismatchError(SparseVoxError):
    """Weights do not match the model recorded in a bitstream."""


class WeightFileError(SparseVoxError):
    """Unreadable or damaged weight file."""


class ModelError(SparseVoxError):
    """The context model produced non-finite output."""


class TrainingDiverged(SparseVoxError):
    """Training loss became non-finite."""
