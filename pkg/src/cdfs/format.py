"""Byte-exact encoders and decoders for every on-disk record.

All integers are little-endian and every record is packed with only its
declared pad fields.  EOTs, directory lists and file headers carry three
validators: an id string, a 16-bit word-sum checksum and a pointer to their
own location.  Decoders check them in that order and raise the matching
:class:`~cdfs.errors.FormatError` subclass.

Media addresses appear here as raw 64-bit integers; ``NULL_ADDRESS`` (all
bits set) means "no address".
"""

from __future__ import annotations

import struct
import sys
from array import array
from dataclasses import dataclass, field, fields, is_dataclass
from datetime import datetime, timedelta, timezone
from typing import Callable

from .device import NULL_ADDRESS
from .errors import BadChecksum, BadMagic, FormatError, LocationMismatch, Truncated

FILE_TYPE = 1
DIRECTORY_TYPE = 2
SOFT_LINK_TYPE = 3
FRAGMENTED_TYPE = 4
FIRM_LINK_TYPE = 5
ADDNAME_TYPE = 6
FILE_TYPES = {1: "file", 2: "directory", 3: "soft-link", 4: "fragmented",
              5: "firm-link", 6: "addname"}

EOT_MAGIC = b"\x9f\x02CDFS\xad\x00"
DIRLIST_MAGIC = b"\x9f\x01CDFS\xa8\x00"
FILEHEADER_MAGIC = b"\x9f\x01CDFS\xad\x00"

DOWN = 0xFE
UP = 0xFD
MAX_NAME_LEN = 48
RESERVED_NAME_BYTES = frozenset((0x00, DOWN, UP))

ROOT_DIR = 1

# -- checksums --------------------------------------------------------------


def word_sum(data: bytes) -> int:
    """Sum of ``data`` as little-endian 16-bit words, modulo 65536."""
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    words = array("H")
    words.frombytes(bytes(data))
    if sys.byteorder == "big":
        words.byteswap()
    return sum(words) & 0xFFFF


def verify_checksum(data: bytes) -> bool:
    return word_sum(data) == 0


def checksum_seal(record: bytes, offset: int) -> bytes:
    """Fill the zeroed 16-bit checksum field at ``offset`` so the record sums to 0."""
    if offset % 2 or offset < 0 or offset + 2 > len(record):
        raise ValueError(f"bad checksum field offset {offset}")
    buf = bytearray(record)
    if buf[offset:offset + 2] != b"\x00\x00":
        raise ValueError("checksum field must be zero before sealing")
    struct.pack_into("<H", buf, offset, (-word_sum(buf)) & 0xFFFF)
    return bytes(buf)


def _pad_even(data: bytes) -> bytes:
    return data + b"\x00" if len(data) % 2 else data


# -- timestamps -------------------------------------------------------------

EPOCH = datetime(1901, 1, 1, tzinfo=timezone.utc)
UNIX_EPOCH_OFFSET = 2177452800  # seconds from 1901-01-01 to 1970-01-01


def to_timestamp(when: datetime) -> int:
    """Seconds since 1901-01-01T00:00:00 GMT (naive datetimes are taken as GMT)."""
    if when.tzinfo is None:
        when = when.replace(tzinfo=timezone.utc)
    delta = when - EPOCH
    if delta < timedelta(0):
        raise ValueError("times before 1901-01-01 GMT cannot be represented")
    return delta.days * 86400 + delta.seconds


def from_timestamp(seconds: int) -> datetime:
    return EPOCH + timedelta(seconds=seconds)


def from_unix(seconds: float) -> int:
    return int(seconds) + UNIX_EPOCH_OFFSET


def to_unix(seconds: int) -> int:
    return seconds - UNIX_EPOCH_OFFSET


# -- helpers ----------------------------------------------------------------


def _fixed(value: bytes, width: int, what: str) -> bytes:
    if len(value) > width:
        raise FormatError(f"{what} longer than {width} bytes")
    return value.ljust(width, b"\x00")


def _unfixed(value: bytes) -> bytes:
    return value.rstrip(b"\x00")


def validate_name(name: bytes) -> bytes:
    if not 1 <= len(name) <= MAX_NAME_LEN:
        raise FormatError(f"entry names must be 1-{MAX_NAME_LEN} bytes, got {len(name)}")
    bad = RESERVED_NAME_BYTES.intersection(name)
    if bad:
        raise FormatError(f"entry name contains reserved byte 0x{min(bad):02X}")
    return name


def _need(data: bytes, n: int, what: str) -> None:
    if len(data) < n:
        raise Truncated(f"{what}: need {n} bytes, have {len(data)}")


def _check_magic(data: bytes, magic: bytes, what: str) -> None:
    _need(data, len(magic), what)
    if bytes(data[:len(magic)]) != magic:
        raise BadMagic(f"{what}: bad id string")


def _check_location(found: int, expected: int | None, what: str) -> None:
    if expected is not None and found != expected:
        raise LocationMismatch(f"{what}: records location 0x{found:016x}, read at 0x{expected:016x}")


# -- End-Of-Transaction -----------------------------------------------------

_EOT_HEAD = struct.Struct("<8sHHQHHQQQQIQQIII")
_POINTERDEF = struct.Struct("<IHH")
_EOT_TAIL = struct.Struct("<H32s")
EOT_FIXED_SIZE = _EOT_HEAD.size + 16 * _POINTERDEF.size + _EOT_TAIL.size  # 250
EOT_CHECKSUM_OFFSET = 20


@dataclass
class Eot:
    eot_location: int = NULL_ADDRESS
    current_dir_list: int = NULL_ADDRESS
    previous_eot_location: int = NULL_ADDRESS
    next_eot_location: int = NULL_ADDRESS
    filesystem_creation_time: int = 0
    trans_number: int = 0
    trans_start_time: int = 0
    trans_end_time: int = 0
    files_written_on_trans: int = 0
    dirs_written_on_trans: int = 0
    next_free_file_number: int = 2
    pointerdes: tuple[tuple[int, int], ...] = ()
    encryption_standard: bytes = bytes(32)
    owners_name: bytes = b""
    eot_version: int = 1
    implementation_id: int = 1

    @property
    def eot_length(self) -> int:
        return EOT_FIXED_SIZE + len(self.owners_name) + 1


def encode_eot(e: Eot) -> bytes:
    if len(e.pointerdes) > 16:
        raise FormatError("at most 16 pointerdefs")
    if b"\x00" in e.owners_name:
        raise FormatError("owners_name may not contain NUL")
    length = e.eot_length
    if length > 0xFFFF:
        raise FormatError("owners_name too long")
    out = bytearray(_EOT_HEAD.pack(
        EOT_MAGIC, e.eot_version, length, e.eot_location, 0, e.implementation_id,
        e.current_dir_list, e.previous_eot_location, e.next_eot_location,
        e.filesystem_creation_time, e.trans_number, e.trans_start_time, e.trans_end_time,
        e.files_written_on_trans, e.dirs_written_on_trans, e.next_free_file_number))
    for i in range(16):
        modulo, bits = e.pointerdes[i] if i < len(e.pointerdes) else (0, 0)
        out += _POINTERDEF.pack(modulo, bits, 0)
    out += _EOT_TAIL.pack(len(e.pointerdes), _fixed(e.encryption_standard, 32, "encryption_standard"))
    out += e.owners_name + b"\x00"
    return checksum_seal(_pad_even(bytes(out)), EOT_CHECKSUM_OFFSET)


def decode_eot(data: bytes, location: int | None = None) -> Eot:
    _check_magic(data, EOT_MAGIC, "EOT")
    _need(data, EOT_FIXED_SIZE, "EOT")
    head = _EOT_HEAD.unpack_from(data)
    length = head[2]
    if length <= EOT_FIXED_SIZE:
        raise FormatError(f"EOT: implausible eot_length {length}")
    _need(data, length, "EOT")
    if not verify_checksum(data[:length]):
        raise BadChecksum("EOT: checksum mismatch")
    _check_location(head[3], location, "EOT")
    if data[length - 1] != 0:
        raise FormatError("EOT: owners_name is not NUL-terminated")
    used, encryption = _EOT_TAIL.unpack_from(data, _EOT_HEAD.size + 16 * _POINTERDEF.size)
    if used > 16:
        raise FormatError(f"EOT: {used} pointerdefs in use")
    pointerdes = tuple(
        _POINTERDEF.unpack_from(data, _EOT_HEAD.size + i * _POINTERDEF.size)[:2]
        for i in range(used))
    owner = bytes(data[EOT_FIXED_SIZE:length - 1])
    if b"\x00" in owner:
        raise FormatError("EOT: owners_name contains NUL")
    return Eot(
        eot_location=head[3], current_dir_list=head[6], previous_eot_location=head[7],
        next_eot_location=head[8], filesystem_creation_time=head[9], trans_number=head[10],
        trans_start_time=head[11], trans_end_time=head[12], files_written_on_trans=head[13],
        dirs_written_on_trans=head[14], next_free_file_number=head[15], pointerdes=pointerdes,
        encryption_standard=bytes(encryption), owners_name=owner, eot_version=head[1],
        implementation_id=head[5])


# -- Directory list ---------------------------------------------------------

_DL_HEAD = struct.Struct("<8sHHQHHQI")
_DL_ELEMENT = struct.Struct("<IQIQQHH")
DIRLIST_HEADER_SIZE = _DL_HEAD.size  # 36
DIRLIST_ELEMENT_SIZE = _DL_ELEMENT.size  # 36
DIRLIST_CHECKSUM_OFFSET = 20


@dataclass
class DirListElement:
    dir_number: int
    header_location: int
    containing_dir: int
    modify_time: int = 0
    contained_bytes: int = 0
    header_size: int = 0


@dataclass
class DirList:
    elements: list[DirListElement] = field(default_factory=list)
    dir_list_loc: int = NULL_ADDRESS
    prev_dir_list: int = NULL_ADDRESS
    dir_list_version: int = 1

    @property
    def encoded_size(self) -> int:
        return DIRLIST_HEADER_SIZE + DIRLIST_ELEMENT_SIZE * len(self.elements)


def _check_dirlist_order(elements) -> None:
    for a, b in zip(elements, elements[1:]):
        if a.dir_number >= b.dir_number:
            raise FormatError("directory list elements must be sorted by directory number")


def encode_dir_list(d: DirList) -> bytes:
    _check_dirlist_order(d.elements)
    out = bytearray(_DL_HEAD.pack(DIRLIST_MAGIC, d.dir_list_version, DIRLIST_HEADER_SIZE,
                                  d.dir_list_loc, 0, 0, d.prev_dir_list, len(d.elements)))
    for el in d.elements:
        out += _DL_ELEMENT.pack(el.dir_number, el.header_location, el.containing_dir,
                                el.modify_time, el.contained_bytes, el.header_size, 0)
    return checksum_seal(bytes(out), DIRLIST_CHECKSUM_OFFSET)


def dir_list_size(data: bytes) -> int:
    """Total encoded size announced by a directory list header."""
    _need(data, DIRLIST_HEADER_SIZE, "directory list")
    head = _DL_HEAD.unpack_from(data)
    return head[2] + head[7] * DIRLIST_ELEMENT_SIZE


def decode_dir_list(data: bytes, location: int | None = None) -> DirList:
    _check_magic(data, DIRLIST_MAGIC, "directory list")
    _need(data, DIRLIST_HEADER_SIZE, "directory list")
    _, version, hlen, loc, _, _, prev, count = _DL_HEAD.unpack_from(data)
    if hlen != DIRLIST_HEADER_SIZE:
        raise FormatError(f"directory list: unexpected header length {hlen}")
    total = hlen + count * DIRLIST_ELEMENT_SIZE
    _need(data, total, "directory list")
    if not verify_checksum(data[:total]):
        raise BadChecksum("directory list: checksum mismatch")
    _check_location(loc, location, "directory list")
    elements = []
    for i in range(count):
        num, hloc, parent, mtime, cbytes, hsize, _ = _DL_ELEMENT.unpack_from(
            data, hlen + i * DIRLIST_ELEMENT_SIZE)
        elements.append(DirListElement(num, hloc, parent, mtime, cbytes, hsize))
    _check_dirlist_order(elements)
    return DirList(elements, loc, prev, version)


# -- Directory --------------------------------------------------------------

_DIR_INFO = struct.Struct("<IIII")
_DIR_ENTRY = struct.Struct(f"<{MAX_NAME_LEN}sQQIIIHHHH")
DIRECTORY_INFO_SIZE = _DIR_INFO.size  # 16
DIR_ENTRY_SIZE = _DIR_ENTRY.size  # 84


@dataclass
class DirEntry:
    name: bytes
    header_location: int = NULL_ADDRESS
    modify_time: int = 0
    file_number: int = 0
    file_size: int = 0
    file_version: int = 0
    file_type: int = FILE_TYPE
    header_size: int = 0
    addname_count: int = 0

    @property
    def text_name(self) -> str:
        return self.name.decode("utf-8", "surrogateescape")


@dataclass
class Directory:
    entries: list[DirEntry] = field(default_factory=list)
    directory_info_version: int = 1

    @property
    def encoded_size(self) -> int:
        return DIRECTORY_INFO_SIZE + DIR_ENTRY_SIZE * len(self.entries)


def _check_directory_order(entries) -> None:
    for a, b in zip(entries, entries[1:]):
        if a.name == b.name:
            raise FormatError(f"duplicate entry name {a.name!r}")
        if a.name > b.name:
            raise FormatError("directory entries must be sorted by name")


def encode_directory(d: Directory) -> bytes:
    for e in d.entries:
        validate_name(e.name)
    _check_directory_order(d.entries)
    out = bytearray(_DIR_INFO.pack(d.directory_info_version, d.encoded_size,
                                   len(d.entries), DIR_ENTRY_SIZE))
    for e in d.entries:
        out += _DIR_ENTRY.pack(e.name.ljust(MAX_NAME_LEN, b"\x00"), e.header_location,
                               e.modify_time, e.file_number, e.file_size, e.file_version,
                               e.file_type, e.header_size, e.addname_count, 0)
    return bytes(out)


def decode_directory(data: bytes) -> Directory:
    _need(data, DIRECTORY_INFO_SIZE, "directory")
    version, length, count, entry_size = _DIR_INFO.unpack_from(data)
    if entry_size != DIR_ENTRY_SIZE:
        raise FormatError(f"directory: unsupported entry size {entry_size}")
    if length != DIRECTORY_INFO_SIZE + count * DIR_ENTRY_SIZE:
        raise FormatError("directory: length disagrees with entry count")
    _need(data, length, "directory")
    entries = []
    for i in range(count):
        raw = _DIR_ENTRY.unpack_from(data, DIRECTORY_INFO_SIZE + i * DIR_ENTRY_SIZE)
        name = _unfixed(raw[0])
        try:
            validate_name(name)
        except FormatError as exc:
            raise FormatError(f"directory: {exc}") from None
        entries.append(DirEntry(name, *raw[1:9]))
    _check_directory_order(entries)
    return Directory(entries, version)


def directory_size(data: bytes) -> int:
    _need(data, DIRECTORY_INFO_SIZE, "directory")
    return _DIR_INFO.unpack_from(data)[1]


# -- File header and its sections -------------------------------------------

_FH_BASE = struct.Struct("<8sHHHHQIHHHHHH")
FILEHEADER_BASE_SIZE = _FH_BASE.size  # 40
FILEHEADER_CHECKSUM_OFFSET = 12

_ACCESS = struct.Struct("<HH32s32sH")
_BACKUP = struct.Struct("<HHIQQHH")
_FILE_INFO = struct.Struct("<HHQIQQI")
_SOFT_LINK = struct.Struct("<HHQII")
_SITE = struct.Struct("<HH16s16s")
_PROPS = struct.Struct("<IHH")
_PROP_RECORD = struct.Struct("<HH")


@dataclass
class AccessInfo:
    file_owner: bytes = b""
    file_group: bytes = b""
    file_access: int = 0
    version: int = 1

    def encode(self) -> bytes:
        return _ACCESS.pack(self.version, _ACCESS.size, _fixed(self.file_owner, 32, "file_owner"),
                            _fixed(self.file_group, 32, "file_group"), self.file_access)

    @classmethod
    def decode(cls, data: bytes) -> "AccessInfo":
        version, length, owner, group, access = _ACCESS.unpack_from(data)
        if length != _ACCESS.size:
            raise FormatError("access info: bad length")
        return cls(_unfixed(owner), _unfixed(group), access, version)


@dataclass
class BackupInfo:
    containing_directory_number: int = 0
    previous_version_location: int = NULL_ADDRESS
    previous_eot_location: int = NULL_ADDRESS
    filename_offset: int = 0
    previous_version_header_size: int = 0
    backup_pathname: bytes = b""
    version: int = 1

    def encode(self) -> bytes:
        return _BACKUP.pack(self.version, _BACKUP.size + len(self.backup_pathname),
                            self.containing_directory_number, self.previous_version_location,
                            self.previous_eot_location, self.filename_offset,
                            self.previous_version_header_size) + self.backup_pathname

    @classmethod
    def decode(cls, data: bytes) -> "BackupInfo":
        version, length, cdir, prev, peot, foff, phs = _BACKUP.unpack_from(data)
        if not _BACKUP.size <= length <= len(data):
            raise FormatError("backup info: bad length")
        return cls(cdir, prev, peot, foff, phs, bytes(data[_BACKUP.size:length]), version)


@dataclass
class FileInfo:
    file_location: int = NULL_ADDRESS
    file_length: int = 0
    write_time: int = 0
    creation_time: int = 0
    file_version_number: int = 1
    version: int = 1

    def encode(self) -> bytes:
        return _FILE_INFO.pack(self.version, _FILE_INFO.size, self.file_location,
                               self.file_length, self.write_time, self.creation_time,
                               self.file_version_number)

    @classmethod
    def decode(cls, data: bytes) -> "FileInfo":
        version, length, loc, flen, wtime, ctime, fver = _FILE_INFO.unpack_from(data)
        if length != _FILE_INFO.size:
            raise FormatError("file info: bad length")
        return cls(loc, flen, wtime, ctime, fver, version)


@dataclass
class SoftLinkInfo:
    creation_time: int = 0
    target_dir: int = ROOT_DIR
    target_version: int = 0
    target_name: bytes = b""
    version: int = 1

    def encode(self) -> bytes:
        return _SOFT_LINK.pack(self.version, _SOFT_LINK.size + len(self.target_name),
                               self.creation_time, self.target_dir,
                               self.target_version) + self.target_name

    @classmethod
    def decode(cls, data: bytes) -> "SoftLinkInfo":
        version, length, ctime, tdir, tver = _SOFT_LINK.unpack_from(data)
        if not _SOFT_LINK.size <= length <= len(data):
            raise FormatError("soft link info: bad length")
        return cls(ctime, tdir, tver, bytes(data[_SOFT_LINK.size:length]), version)


@dataclass
class SiteInfo:
    opsys: bytes = b""
    opsys_version: bytes = b""
    site_name: bytes = b""
    version: int = 1

    def encode(self) -> bytes:
        return _SITE.pack(self.version, _SITE.size + len(self.site_name),
                          _fixed(self.opsys, 16, "opsys"),
                          _fixed(self.opsys_version, 16, "opsys_version")) + self.site_name

    @classmethod
    def decode(cls, data: bytes) -> "SiteInfo":
        version, length, opsys, opver = _SITE.unpack_from(data)
        if not _SITE.size <= length <= len(data):
            raise FormatError("site info: bad length")
        return cls(_unfixed(opsys), _unfixed(opver), bytes(data[_SITE.size:length]), version)


@dataclass
class PropertyList:
    """Name/value pairs; an empty value marks a flag property such as BITSTREAM."""

    properties: list[tuple[bytes, bytes]] = field(default_factory=list)
    version: int = 1

    def encode(self) -> bytes:
        body = bytearray()
        for name, value in self.properties:
            if not all(0x20 <= c < 0x7F for c in value):
                raise FormatError("property values must be printable ASCII")
            body += _PROP_RECORD.pack(len(name), len(value)) + name + value
        return _PROPS.pack(self.version, _PROPS.size + len(body), len(self.properties)) + bytes(body)

    @classmethod
    def decode(cls, data: bytes) -> "PropertyList":
        version, length, count = _PROPS.unpack_from(data)
        if not _PROPS.size <= length <= len(data):
            raise FormatError("property list: bad length")
        pos, props = _PROPS.size, []
        for _ in range(count):
            if pos + _PROP_RECORD.size > length:
                raise FormatError("property list: record overruns the list")
            nlen, vlen = _PROP_RECORD.unpack_from(data, pos)
            pos += _PROP_RECORD.size
            if pos + nlen + vlen > length:
                raise FormatError("property list: record overruns the list")
            props.append((bytes(data[pos:pos + nlen]), bytes(data[pos + nlen:pos + nlen + vlen])))
            pos += nlen + vlen
        if pos != length:
            raise FormatError("property list: trailing bytes")
        return cls(props, version)

    def get(self, name: bytes) -> bytes | None:
        for key, value in self.properties:
            if key == name:
                return value
        return None


@dataclass
class FileHeader:
    file_number: int
    file_type: int = FILE_TYPE
    fileheader_location: int = NULL_ADDRESS
    access: AccessInfo | None = None
    backup: BackupInfo | None = None
    file_info: FileInfo | None = None
    soft_link: SoftLinkInfo | None = None
    site: SiteInfo | None = None
    properties: PropertyList | None = None
    header_version: int = 1

    def sections(self) -> list:
        """Present sections in on-disk order (the soft link takes the file-info slot)."""
        info = self.soft_link if self.file_type == SOFT_LINK_TYPE else self.file_info
        return [self.access, self.backup, info, self.site, self.properties]

    @property
    def encoded_size(self) -> int:
        """Unpadded length (the fileheader_length field)."""
        return FILEHEADER_BASE_SIZE + sum(len(s.encode()) for s in self.sections() if s is not None)

    @property
    def padded_size(self) -> int:
        n = self.encoded_size
        return n + (n % 2)


def encode_fileheader(h: FileHeader) -> bytes:
    if h.file_type == SOFT_LINK_TYPE:
        if h.soft_link is None or h.file_info is not None:
            raise FormatError("a soft link header carries soft-link info instead of file info")
    elif h.soft_link is not None:
        raise FormatError("soft-link info is only valid on soft link headers")
    offsets, body = [], bytearray()
    for section in h.sections():
        if section is None:
            offsets.append(0)
            continue
        offsets.append(FILEHEADER_BASE_SIZE + len(body))
        body += section.encode()
    total = FILEHEADER_BASE_SIZE + len(body)
    if total > 0xFFFF:
        raise FormatError("file header larger than 65535 bytes")
    base = _FH_BASE.pack(FILEHEADER_MAGIC, h.header_version, FILEHEADER_BASE_SIZE, 0, total,
                         h.fileheader_location, h.file_number, h.file_type, *offsets)
    return checksum_seal(_pad_even(base + bytes(body)), FILEHEADER_CHECKSUM_OFFSET)


def fileheader_size(data: bytes) -> int:
    _need(data, 16, "file header")
    return struct.unpack_from("<H", data, 14)[0]


def decode_fileheader(data: bytes, location: int | None = None) -> FileHeader:
    _check_magic(data, FILEHEADER_MAGIC, "file header")
    _need(data, FILEHEADER_BASE_SIZE, "file header")
    (_, hversion, hlen, _, total, loc, fnum, ftype, *offsets) = _FH_BASE.unpack_from(data)
    if hlen != FILEHEADER_BASE_SIZE or total < FILEHEADER_BASE_SIZE:
        raise FormatError("file header: bad length fields")
    _need(data, total, "file header")
    if not verify_checksum(data[:total]):
        raise BadChecksum("file header: checksum mismatch")
    _check_location(loc, location, "file header")
    if ftype not in FILE_TYPES:
        raise FormatError(f"file header: unknown file type {ftype}")
    present = [(i, off) for i, off in enumerate(offsets) if off]
    for (_, a), (_, b) in zip(present, present[1:]):
        if a >= b:
            raise FormatError("file header: section offsets out of order")
    info_cls = SoftLinkInfo if ftype == SOFT_LINK_TYPE else FileInfo
    kinds = [AccessInfo, BackupInfo, info_cls, SiteInfo, PropertyList]
    sections: list = [None] * 5
    for n, (i, off) in enumerate(present):
        end = present[n + 1][1] if n + 1 < len(present) else total
        if off < FILEHEADER_BASE_SIZE or end > total:
            raise FormatError("file header: section outside the record")
        chunk = bytes(data[off:end])
        try:
            sections[i] = kinds[i].decode(chunk)
        except struct.error:
            raise Truncated(f"file header: {kinds[i].__name__} truncated") from None
    h = FileHeader(fnum, ftype, loc, sections[0], sections[1], None, None,
                   sections[3], sections[4], hversion)
    if ftype == SOFT_LINK_TYPE:
        h.soft_link = sections[2]
    else:
        h.file_info = sections[2]
    return h


# -- File map ---------------------------------------------------------------

_STRIP_INFO = struct.Struct("<III")
_FRAGMENT = struct.Struct("<QII")
STRIP_INFO_SIZE = _STRIP_INFO.size  # 12
FRAGMENT_SIZE = _FRAGMENT.size  # 16


@dataclass
class Fragment:
    loc: int
    valid_chars: int
    ordinal: int

    @property
    def end(self) -> int:
        return self.ordinal + self.valid_chars


@dataclass
class FileMap:
    strips: list[Fragment] = field(default_factory=list)
    strip_info_version: int = 1

    @property
    def encoded_size(self) -> int:
        return STRIP_INFO_SIZE + FRAGMENT_SIZE * len(self.strips)


def _check_strips(strips) -> None:
    for s in strips:
        if s.valid_chars < 1:
            raise FormatError("strips must hold at least one byte")
    for a, b in zip(strips, strips[1:]):
        if a.ordinal > b.ordinal:
            raise FormatError("strips must be sorted by logical offset")


def encode_filemap(m: FileMap) -> bytes:
    _check_strips(m.strips)
    out = bytearray(_STRIP_INFO.pack(m.strip_info_version, m.encoded_size, len(m.strips)))
    for s in m.strips:
        out += _FRAGMENT.pack(s.loc, s.valid_chars, s.ordinal)
    return bytes(out)


def filemap_size(data: bytes) -> int:
    _need(data, STRIP_INFO_SIZE, "file map")
    return _STRIP_INFO.unpack_from(data)[1]


def decode_filemap(data: bytes) -> FileMap:
    _need(data, STRIP_INFO_SIZE, "file map")
    version, length, count = _STRIP_INFO.unpack_from(data)
    if length != STRIP_INFO_SIZE + count * FRAGMENT_SIZE:
        raise FormatError("file map: length disagrees with strip count")
    _need(data, length, "file map")
    strips = [Fragment(*_FRAGMENT.unpack_from(data, STRIP_INFO_SIZE + i * FRAGMENT_SIZE))
              for i in range(count)]
    _check_strips(strips)
    return FileMap(strips, version)


# -- sniffing and text rendering --------------------------------------------


def decode_any(data: bytes, location: int | None = None):
    """Decode whichever checksummed record starts ``data``."""
    head = bytes(data[:8])
    if head == EOT_MAGIC:
        return decode_eot(data, location)
    if head == DIRLIST_MAGIC:
        return decode_dir_list(data, location)
    if head == FILEHEADER_MAGIC:
        return decode_fileheader(data, location)
    raise BadMagic("no CDFS record at this address")


ADDRESS_FIELDS = frozenset({
    "eot_location", "current_dir_list", "previous_eot_location", "next_eot_location",
    "dir_list_loc", "prev_dir_list", "header_location", "fileheader_location",
    "previous_version_location", "file_location", "loc",
})
TIME_FIELDS = frozenset({
    "filesystem_creation_time", "trans_start_time", "trans_end_time", "modify_time",
    "write_time", "creation_time",
})


def _render_value(name: str, value, addr: Callable[[int], str]) -> str:
    if name in ADDRESS_FIELDS and isinstance(value, int):
        return addr(value)
    if name in TIME_FIELDS and isinstance(value, int):
        return f"{value} ({from_timestamp(value).strftime('%Y-%m-%dT%H:%M:%SZ')})"
    if name == "file_type":
        return f"{value} ({FILE_TYPES.get(value, '?')})"
    if isinstance(value, bytes):
        return repr(value)[1:]
    return str(value)


def render(record, addr: Callable[[int], str] | None = None, prefix: str = "") -> str:
    """One ``name = value`` line per field, nested sections dotted."""
    if addr is None:
        addr = lambda raw: "null" if raw == NULL_ADDRESS else f"0x{raw:016x}"
    lines = [f"{prefix}record = {type(record).__name__}"] if not prefix else []
    for f in fields(record):
        value = getattr(record, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(value):
            lines.append(render(value, addr, key + "."))
        elif isinstance(value, list) and value and is_dataclass(value[0]):
            lines.append(f"{key}.count = {len(value)}")
            for i, item in enumerate(value):
                lines.append(render(item, addr, f"{key}[{i}]."))
        elif value is None:
            lines.append(f"{key} = absent")
        else:
            lines.append(f"{key} = {_render_value(f.name, value, addr)}")
    return "\n".join(line for line in lines if line)
