"""Exception types raised across the pipeline."""


class TexForensicsError(Exception):
    """Base class for all package errors."""


class DataError(TexForensicsError):
    """Problems with input data (files, images, datasets)."""


class MalformedFile(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class InvalidQuality(ValueError, TexForensicsError):
    pass


class DegenerateSize(ValueError, TexForensicsError):
    pass


class PatchTooSmall(ValueError, TexForensicsError):
    pass


class ImageTooSmall(DataError, ValueError):
    pass


class ShapeMismatch(ValueError, TexForensicsError):
    pass


class StaleCache(RuntimeError, TexForensicsError):
    pass


class EmptyDataset(DataError):
    pass


class SingleClassDataset(DataError):
    pass


class MissingSubfolder(DataError):
    pass


class EmptyInput(ValueError, TexForensicsError):
    pass


class NoPositives(ValueError, TexForensicsError):
    pass


class CorruptCheckpoint(DataError):
    pass
