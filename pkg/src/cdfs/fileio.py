"""File contents: read and write streams, native import/export, and
fragmented files updated by patching.

Write streams spool to a native temporary file (``CDFS_SPOOL_DIR`` or the
system temp directory) because the header, which carries the length and a
checksum, lands on the media before the content.
"""

from __future__ import annotations

import io
import os
import shutil
import tempfile
from dataclasses import dataclass, replace

from . import format as fmt
from . import namespace as ns
from .device import NULL_ADDRESS
from .errors import FileIOError, HoleError, NameExists, NamespaceError, StreamBusy
from .format import (
    ADDNAME_TYPE,
    DIRECTORY_TYPE,
    FILE_TYPE,
    FRAGMENTED_TYPE,
    SOFT_LINK_TYPE,
    DirEntry,
    FileHeader,
    Fragment,
)
from .volume import Volume

MIN_STRIP = 4096
SPOOL_ENV = "CDFS_SPOOL_DIR"


# -- fragment maps ------------------------------------------------------------


@dataclass(frozen=True)
class Piece:
    """A run of logical bytes [lo, hi) stored from media byte ``pos`` on."""

    lo: int
    hi: int
    pos: int


def coverage(v: Volume, strips: list[Fragment]) -> list[Piece]:
    """Non-overlapping pieces covering every mapped byte, in logical order."""
    pieces: list[Piece] = []
    covered = 0
    for s in sorted(strips, key=lambda s: s.ordinal):
        lo = max(s.ordinal, covered)
        if s.end <= lo:
            continue
        base = v.scheme.to_byte(s.loc)
        pieces.append(Piece(lo, s.end, base + lo - s.ordinal))
        covered = s.end
    return pieces


def valid_bytes(strips: list[Fragment]) -> int:
    total, covered = 0, 0
    for s in sorted(strips, key=lambda s: s.ordinal):
        lo = max(s.ordinal, covered)
        if s.end > lo:
            total += s.end - lo
            covered = s.end
    return total


def holes(pieces: list[Piece], end: int) -> list[tuple[int, int]]:
    out, pos = [], 0
    for p in pieces:
        if p.lo > pos:
            out.append((pos, p.lo))
        pos = max(pos, p.hi)
    if pos < end:
        out.append((pos, end))
    return out


def _read_bytes(v: Volume, pos: int, n: int) -> bytes:
    return v.read_at(v.scheme.from_byte(pos), n) if n else b""


def _read_mapped(v: Volume, pieces: list[Piece], offset: int, n: int) -> bytes:
    import bisect

    out = bytearray()
    pos, stop = offset, offset + n
    i = max(0, bisect.bisect_right([p.lo for p in pieces], pos) - 1)
    while pos < stop:
        if i >= len(pieces) or pieces[i].lo > pos:
            raise HoleError(pos)
        p = pieces[i]
        if p.hi <= pos:
            i += 1
            continue
        take = min(stop, p.hi) - pos
        out += _read_bytes(v, p.pos + pos - p.lo, take)
        pos += take
        i += 1
    return bytes(out)


# -- streams --------------------------------------------------------------------


class ReadStream(io.RawIOBase):
    """Reads one version of a file; the version is fixed at open time."""

    def __init__(self, v: Volume, header: FileHeader):
        super().__init__()
        self.v = v
        self.header = header
        info = header.file_info
        self.end = info.file_length
        self.position = 0
        if header.file_type == FRAGMENTED_TYPE:
            self.pieces = coverage(v, v.read_filemap(info.file_location).strips)
        else:
            start = v.scheme.to_byte(info.file_location)
            self.pieces = [Piece(0, self.end, start)] if self.end else []

    def readable(self) -> bool:
        return True

    def seekable(self) -> bool:
        return True

    @property
    def holes(self) -> list[tuple[int, int]]:
        return holes(self.pieces, self.end)

    def read(self, n: int = -1) -> bytes:
        if self.closed:
            raise FileIOError("read from a closed stream")
        if n is None or n < 0:
            n = self.end - self.position
        n = max(0, min(n, self.end - self.position))
        data = _read_mapped(self.v, self.pieces, self.position, n)
        self.position += n
        return data

    def readinto(self, b) -> int:
        data = self.read(len(b))
        b[:len(data)] = data
        return len(data)

    def seek(self, offset: int, whence: int = io.SEEK_SET) -> int:
        base = {io.SEEK_SET: 0, io.SEEK_CUR: self.position, io.SEEK_END: self.end}[whence]
        target = base + offset
        if not 0 <= target <= self.end:
            raise FileIOError(f"seek to {target} outside [0, {self.end}]")
        self.position = target
        return target

    def tell(self) -> int:
        return self.position


class WriteStream(io.RawIOBase):
    """Collects a new version of (dirnum, name); it reaches the media on close."""

    def __init__(self, v: Volume, dirnum: int, name: bytes, align: bool = False):
        super().__init__()
        self.v = v
        self.dirnum = dirnum
        self.name = name
        self.align = align
        self.bytes_written = 0
        self.write_time: int | None = None
        self.access: fmt.AccessInfo | None = None
        self.spool = tempfile.TemporaryFile(dir=os.environ.get(SPOOL_ENV) or None)
        self.result: DirEntry | None = None

    def writable(self) -> bool:
        return True

    def write(self, data) -> int:
        if self.closed:
            raise FileIOError("write to a closed stream")
        n = self.spool.write(data)
        self.bytes_written += n
        return n

    def close(self) -> None:
        if self.closed:
            return
        try:
            self.v.write_stream = None
            self.spool.seek(0)
            self.result = _emit(self)
        finally:
            self.v.write_stream = None
            self.spool.close()
            super().close()

    def abort(self) -> None:
        """Drop the spooled bytes without writing anything."""
        self.v.write_stream = None
        self.spool.close()
        super().close()


def _emit(s: WriteStream) -> DirEntry:
    v = s.v
    ds = v.directory(s.dirnum)
    prior = ds.get(s.name)
    now = v.now()
    version, created, previous, prev_size = 1, now, NULL_ADDRESS, 0
    number, access, props, addnames = None, s.access, None, 0
    if prior is not None:
        old = v.read_header(prior.header_location)
        number, addnames = prior.file_number, prior.addname_count
        previous, prev_size = prior.header_location, old.encoded_size
        version = old.file_info.file_version_number + 1
        created = old.file_info.creation_time
        access = access or old.access
        props = old.properties
    write_time = s.write_time if s.write_time is not None else now
    info = fmt.FileInfo(NULL_ADDRESS, s.bytes_written, write_time, created, version)
    header = FileHeader(number if number is not None else 0, FILE_TYPE, access=access,
                        backup=v.backup_info(s.dirnum, s.name, previous, prev_size),
                        file_info=info, site=v.site, properties=props)
    # Check space before spending a file number on a doomed write.
    v.ensure_space(v.blocks_for(header.padded_size + s.bytes_written + (v.block_size if s.align else 0)))
    if number is None:
        header.file_number = v.alloc_number()
    addr, header = v.write_contiguous(header, s.spool, s.bytes_written, s.align)
    entry = DirEntry(s.name, addr, write_time, header.file_number, s.bytes_written, version,
                     FILE_TYPE, header.encoded_size, addnames)
    if prior is not None:
        ds.replace_entry(s.name, entry)
    else:
        ds.insert(entry)
    v.mark_dirty(s.dirnum)
    return entry


def _target_for_write(v: Volume, dirnum: int, name: str | bytes) -> bytes:
    raw = ns.valid_name(name)
    ds = v.directory(dirnum)
    e = ds.get(raw)
    if e is None:
        return raw
    if e.file_type == ADDNAME_TYPE:
        e = ns.primary_of(ds, e)
    if e.file_type == DIRECTORY_TYPE:
        raise NameExists(f"{e.text_name!r} is a directory")
    if e.file_type == SOFT_LINK_TYPE:
        raise NameExists(f"{e.text_name!r} is a soft link")
    return e.name


def open_resolved(v: Volume, r: ns.ResolvedEntry, version: int = 0) -> ReadStream:
    if r.is_link:
        r = ns.resolve_link(v, r)
    if r.is_dir:
        raise NamespaceError("cannot open a directory as a file")
    version = version or r.version
    _, header = ns.find_version(v, r.entry.header_location, version)
    return ReadStream(v, header)


def fopen(v: Volume, dirnum: int, name: str | bytes, mode: str = "r", version: int = 0,
          align: bool = False):
    """Open a read stream (links followed) or the volume's one write stream."""
    if mode == "r":
        ds = v.directory(dirnum)
        e = ns.primary_of(ds, ns.get_entry(v, dirnum, name))
        return open_resolved(v, ns.ResolvedEntry(dirnum, e.file_number, e), version)
    if mode != "w":
        raise ValueError(f"mode must be 'r' or 'w', not {mode!r}")
    if v.write_stream is not None:
        raise StreamBusy("only one write stream may be open")
    raw = _target_for_write(v, dirnum, name)
    v.begin()
    s = WriteStream(v, dirnum, raw, align)
    v.write_stream = s
    return s


# -- native import and export -----------------------------------------------------


def _native_access(st: os.stat_result) -> fmt.AccessInfo:
    import grp
    import pwd

    try:
        owner = pwd.getpwuid(st.st_uid).pw_name.encode()
    except KeyError:
        owner = str(st.st_uid).encode()
    try:
        group = grp.getgrgid(st.st_gid).gr_name.encode()
    except KeyError:
        group = str(st.st_gid).encode()
    return fmt.AccessInfo(owner[:31], group[:31], st.st_mode & 0o7777)


def import_file(v: Volume, native_path: str | os.PathLike, dirnum: int, name: str | bytes,
                start_on_next_block: bool = False, preserve: bool = False) -> DirEntry:
    with open(native_path, "rb") as src:
        st = os.fstat(src.fileno())
        s = fopen(v, dirnum, name, "w", align=start_on_next_block)
        try:
            shutil.copyfileobj(src, s.spool, 1 << 20)
            s.bytes_written = s.spool.tell()
        except BaseException:
            s.abort()
            raise
        if preserve:
            s.write_time = fmt.from_unix(st.st_mtime)
            s.access = _native_access(st)
    s.close()
    return s.result


def export_file(v: Volume, dirnum: int, name: str | bytes, version: int,
                native_path: str | os.PathLike, preserve: bool = False) -> None:
    with fopen(v, dirnum, name, "r", version) as s:
        gaps = s.holes
        if gaps:
            raise HoleError(gaps[0][0])
        with open(native_path, "wb") as out:
            while chunk := s.read(1 << 20):
                out.write(chunk)
        info = s.header.file_info
        access = s.header.access
    if preserve:
        t = fmt.to_unix(info.write_time)
        os.utime(native_path, (t, t))
        if access is not None:
            _restore_owner(native_path, access)


def _restore_owner(path, access: fmt.AccessInfo) -> None:
    import grp
    import pwd

    try:
        uid = pwd.getpwnam(access.file_owner.decode()).pw_uid
        gid = grp.getgrnam(access.file_group.decode()).gr_gid
        os.chown(path, uid, gid)
    except (KeyError, OSError, UnicodeDecodeError):
        pass
    if access.file_access:
        try:
            os.chmod(path, access.file_access & 0o7777)
        except OSError:
            pass


# -- fragmented files -------------------------------------------------------------


def _file_entry(v: Volume, dirnum: int, name: str | bytes) -> DirEntry:
    ds = v.directory(dirnum)
    e = ns.primary_of(ds, ns.get_entry(v, dirnum, name))
    if e.file_type not in (FILE_TYPE, FRAGMENTED_TYPE):
        raise FileIOError(f"{e.text_name!r} is not a file")
    return e


def _current_strips(v: Volume, header: FileHeader) -> list[Fragment]:
    info = header.file_info
    if header.file_type == FRAGMENTED_TYPE:
        return v.read_filemap(info.file_location).strips
    return [Fragment(info.file_location, info.file_length, 0)] if info.file_length else []


def _next_header(v: Volume, dirnum: int, e: DirEntry, old: FileHeader, length: int) -> FileHeader:
    info = fmt.FileInfo(NULL_ADDRESS, length, v.now(), old.file_info.creation_time,
                        old.file_info.file_version_number + 1)
    return FileHeader(e.file_number, FRAGMENTED_TYPE, access=old.access,
                      backup=v.backup_info(dirnum, e.name, e.header_location, old.encoded_size),
                      file_info=info, site=v.site, properties=old.properties)


def _install(v: Volume, dirnum: int, e: DirEntry, addr: int, header: FileHeader,
             strips: list[Fragment]) -> DirEntry:
    info = header.file_info
    entry = replace(e, header_location=addr, modify_time=info.write_time,
                    file_size=valid_bytes(strips), file_version=info.file_version_number,
                    file_type=FRAGMENTED_TYPE, header_size=header.encoded_size)
    v.directory(dirnum).replace_entry(e.name, entry)
    v.mark_dirty(dirnum)
    return entry


def convert_to_fragmented(v: Volume, dirnum: int, name: str | bytes) -> DirEntry:
    """New header plus a one-strip map over the existing content."""
    v.guard()
    e = _file_entry(v, dirnum, name)
    if e.file_type == FRAGMENTED_TYPE:
        raise FileIOError(f"{e.text_name!r} is already fragmented")
    old = v.read_header(e.header_location)
    strips = _current_strips(v, old)
    header = _next_header(v, dirnum, e, old, old.file_info.file_length)
    addr, header = v.write_fragmented(header, strips, [], b"")
    return _install(v, dirnum, e, addr, header, strips)


def convert_to_contiguous(v: Volume, dirnum: int, name: str | bytes) -> None:
    raise FileIOError("converting a fragmented file back to contiguous is not supported")


def _run_before(pieces: list[Piece], offset: int) -> int:
    """Length of the mapped run ending exactly at ``offset``."""
    for p in pieces:
        if p.lo < offset <= p.hi:
            return offset - p.lo
    return 0


def _run_after(pieces: list[Piece], offset: int) -> int:
    for p in pieces:
        if p.lo <= offset < p.hi:
            return p.hi - offset
    return 0


def clip(v: Volume, strips: list[Fragment], lo: int, hi: int) -> list[Fragment]:
    """Drop the logical range [lo, hi) from every strip, splitting as needed."""
    out = []
    for s in strips:
        if s.end <= lo or s.ordinal >= hi:
            out.append(replace(s))
            continue
        if s.ordinal < lo:
            out.append(Fragment(s.loc, lo - s.ordinal, s.ordinal))
        if s.end > hi:
            out.append(Fragment(v.scheme.add_bytes(s.loc, hi - s.ordinal), s.end - hi, hi))
    return out


def patch(v: Volume, dirnum: int, name: str | bytes, offset: int, data: bytes) -> DirEntry:
    """Overwrite ``data`` at logical ``offset`` by writing one new strip.

    The strip is widened to MIN_STRIP bytes with neighbouring mapped bytes
    where they exist.  A contiguous file is turned into a fragmented one in
    the same write.
    """
    v.guard()
    if not data:
        raise FileIOError("patch needs at least one byte")
    if offset < 0:
        raise FileIOError("negative patch offset")
    e = _file_entry(v, dirnum, name)
    old = v.read_header(e.header_location)
    end = old.file_info.file_length
    strips = _current_strips(v, old)
    pieces = coverage(v, strips)
    stop = offset + len(data)
    for h0, h1 in holes(pieces, end):
        if h0 < stop and offset < h1 and h0 < offset:
            raise FileIOError(f"patch at {offset} leaves part of the hole at {h0}..{h1} unfilled")

    need = max(0, MIN_STRIP - len(data))
    before, after = _run_before(pieces, offset), _run_after(pieces, stop)
    left = min(before, need // 2)
    right = min(after, need - left)
    left = min(before, need - right)
    lo, hi = offset - left, stop + right
    body = _read_mapped(v, pieces, lo, left) + bytes(data) + _read_mapped(v, pieces, stop, right)

    new_strip = Fragment(NULL_ADDRESS, hi - lo, lo)
    strips = sorted(clip(v, strips, lo, hi) + [new_strip], key=lambda s: s.ordinal)
    header = _next_header(v, dirnum, e, old, max(end, hi))
    addr, header = v.write_fragmented(header, strips, [new_strip], body)
    return _install(v, dirnum, e, addr, header, strips)


# -- compaction support -------------------------------------------------------------


def copy_version(src: Volume, e: DirEntry, out: Volume, dirnum: int) -> DirEntry:
    """Write the newest version of ``e`` into ``out`` as version 1."""
    old = src.read_header(e.header_location)
    backup = out.backup_info(dirnum, e.name)
    if old.file_type == SOFT_LINK_TYPE:
        header = replace(old, backup=backup)
        addr = out.write_header(header)
        return replace(e, header_location=addr, header_size=header.encoded_size, file_version=1)

    info = replace(old.file_info, file_location=NULL_ADDRESS, file_version_number=1)
    header = replace(old, backup=backup, file_info=info)
    if old.file_type == FRAGMENTED_TYPE:
        pieces = coverage(src, src.read_filemap(old.file_info.file_location).strips)
        fresh = [Fragment(NULL_ADDRESS, p.hi - p.lo, p.lo) for p in pieces]
        body = b"".join(_read_bytes(src, p.pos, p.hi - p.lo) for p in pieces)
        addr, header = out.write_fragmented(header, fresh, fresh, body)
    else:
        aligned = (src.scheme.offset_of(old.file_info.file_location) == 0
                   and old.file_info.file_length > 0)
        with ReadStream(src, old) as stream:
            addr, header = out.write_contiguous(header, stream, old.file_info.file_length, aligned)
    return replace(e, header_location=addr, header_size=header.encoded_size, file_version=1)
