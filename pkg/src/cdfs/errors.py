"""Exception hierarchy shared by every layer."""


class CdfsError(Exception):
    """Base class for all errors raised by the package."""


# -- device ---------------------------------------------------------------

class DeviceError(CdfsError):
    pass


class CorruptImage(DeviceError):
    pass


class GeometryMismatch(DeviceError):
    pass


class AddressError(DeviceError, ValueError):
    """Address field out of range or ordinal outside the media."""


class NonSequentialWrite(DeviceError):
    pass


class AlreadyWritten(DeviceError):
    pass


class MediaFull(DeviceError):
    pass


class NotWritten(DeviceError):
    """Attempt to destroy a virgin block."""


# -- format ---------------------------------------------------------------

class FormatError(CdfsError):
    """A record could not be decoded or encoded."""


class BadMagic(FormatError):
    pass


class BadChecksum(FormatError):
    pass


class LocationMismatch(FormatError):
    """Self-referential pointer disagrees with where the record was read."""


class Truncated(FormatError):
    pass


# -- volume / namespace / fileio ------------------------------------------

class VolumeError(CdfsError):
    pass


class NotVirgin(VolumeError):
    pass


class Unrecoverable(VolumeError):
    pass


class NoTransaction(VolumeError):
    pass


class StreamBusy(VolumeError):
    """A write stream is open where none may be."""


class UnreadableBlock(VolumeError):
    """A structure or content byte lives in a destroyed or virgin block."""


class NamespaceError(CdfsError):
    pass


class NotFound(NamespaceError):
    pass


class NameExists(NamespaceError):
    pass


class InvalidName(NamespaceError, ValueError):
    pass


class LinkDepthExceeded(NamespaceError):
    pass


class NoSuchVersion(NamespaceError):
    pass


class FileIOError(CdfsError):
    pass


class HoleError(FileIOError):
    def __init__(self, offset: int):
        super().__init__(f"read of unmapped byte at logical offset {offset}")
        self.offset = offset
