"""Volume lifecycle: init, mount, recovery, commit, fsck and compaction.

A volume is an append-only log of transactions.  Each transaction writes
file headers and contents as they are produced, then at commit the dirty
directories (deepest first), a new directory list and finally an EOT that
occupies a block of its own.  Every record starts on a block boundary.
"""

from __future__ import annotations

import bisect
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator

from . import format as fmt
from .device import NULL_ADDRESS, AddressScheme, BlockState, Device
from .errors import (
    CdfsError,
    FormatError,
    MediaFull,
    NameExists,
    NoTransaction,
    NotFound,
    NotVirgin,
    StreamBusy,
    Unrecoverable,
    UnreadableBlock,
    VolumeError,
)
from .format import (
    DIRECTORY_TYPE,
    FILE_TYPE,
    FRAGMENTED_TYPE,
    ROOT_DIR,
    ADDNAME_TYPE,
    DirEntry,
    DirListElement,
    FileHeader,
)

Clock = Callable[[], int]


def system_clock() -> int:
    return fmt.from_unix(time.time())


class StepClock:
    """Deterministic clock: starts at ``start`` and ticks ``step`` seconds per call."""

    def __init__(self, start: int = fmt.UNIX_EPOCH_OFFSET + 500_000_000, step: int = 1):
        self.now = start
        self.step = step

    def __call__(self) -> int:
        self.now += self.step
        return self.now


@dataclass
class DirState:
    """Working copy of one live directory."""

    number: int
    parent: int
    entries: list[DirEntry] = field(default_factory=list)
    header_location: int = NULL_ADDRESS
    header_size: int = 0
    version: int = 0
    creation_time: int = 0
    record_size: int = fmt.DIRECTORY_INFO_SIZE
    access: fmt.AccessInfo | None = None
    site: fmt.SiteInfo | None = None
    properties: fmt.PropertyList | None = None
    written_at: int = 0

    def index(self, name: bytes) -> int | None:
        i = bisect.bisect_left(self.entries, name, key=lambda e: e.name)
        if i < len(self.entries) and self.entries[i].name == name:
            return i
        return None

    def get(self, name: bytes) -> DirEntry | None:
        i = self.index(name)
        return None if i is None else self.entries[i]

    def insert(self, entry: DirEntry) -> None:
        if self.index(entry.name) is not None:
            raise NameExists(f"{entry.text_name!r} already exists in directory {self.number}")
        bisect.insort(self.entries, entry, key=lambda e: e.name)

    def remove(self, name: bytes) -> DirEntry:
        i = self.index(name)
        if i is None:
            raise NotFound(f"no entry {name!r} in directory {self.number}")
        return self.entries.pop(i)

    def replace_entry(self, name: bytes, entry: DirEntry) -> None:
        self.remove(name)
        self.insert(entry)


@dataclass
class Finding:
    ordinal: int
    kind: str
    status: str
    detail: str = ""


@dataclass
class FsckReport:
    """Per-block classification plus structural findings."""

    blocks: dict[int, Finding] = field(default_factory=dict)
    problems: list[Finding] = field(default_factory=list)
    chain_length: int = 0
    files: int = 0
    dirs: int = 0
    versions: int = 0
    next_write: int = 0

    def count(self, status: str) -> int:
        return sum(1 for f in self.blocks.values() if f.status == status)

    @property
    def checksum_failures(self) -> int:
        return sum(1 for f in [*self.blocks.values(), *self.problems]
                   if f.status in ("bad-magic", "bad-checksum", "self-ref-mismatch"))

    @property
    def clean(self) -> bool:
        """No structural damage (orphans and destroyed blocks are not damage)."""
        return not self.problems and self.checksum_failures == 0

    def render(self, verbose: bool = False) -> str:
        lines = []
        if verbose:
            for o in sorted(self.blocks):
                f = self.blocks[o]
                lines.append(f"block {o} {f.kind} {f.status}" + (f" {f.detail}" if f.detail else ""))
        for p in self.problems:
            lines.append(f"problem block {p.ordinal} {p.kind} {p.status} {p.detail}".rstrip())
        statuses = sorted({f.status for f in self.blocks.values()})
        lines.append(f"blocks {self.next_write}: " +
                     ", ".join(f"{s} {self.count(s)}" for s in statuses))
        lines.append(f"transactions {self.chain_length}")
        lines.append(f"directories {self.dirs} files {self.files} versions {self.versions}")
        lines.append("status " + ("clean" if self.clean else "damaged"))
        return "\n".join(lines)


class Volume:
    """A mounted (or freshly initialized) CDFS volume.

    Mutations funnel through one handle; ``commit`` seals them into a
    transaction.  Directories are cached as :class:`DirState` objects.
    """

    def __init__(self, dev: Device, first_eot: fmt.Eot, last_eot: fmt.Eot,
                 next_write: int, clock: Clock | None = None):
        self.dev = dev
        self.first_eot = first_eot
        self.scheme = AddressScheme(first_eot.pointerdes)
        if self.scheme.block_size != dev.block_size:
            raise VolumeError("volume block size disagrees with the device")
        self.block_size = dev.block_size
        self.capacity = min(dev.capacity, self.scheme.block_capacity)
        self.clock = clock or system_clock
        self.last_eot = last_eot
        self.next_write = next_write
        self.next_free_file_number = last_eot.next_free_file_number
        self.dir_list: fmt.DirList | None = None
        self._elements: dict[int, DirListElement] = {}
        self._tree: dict[int, int] = {ROOT_DIR: 0}
        self._dirs: dict[int, DirState] = {}
        self.dirty: set[int] = set()
        self.trans_open = False
        self.trans_start = 0
        self.files_written = 0
        self.write_stream = None
        self.mount_probes = 0
        self.recovered = False
        self._site_loaded = False
        self._site: fmt.SiteInfo | None = None
        if last_eot.current_dir_list != NULL_ADDRESS:
            self.dir_list = self.read_dir_list(last_eot.current_dir_list)
            for el in self.dir_list.elements:
                self._elements[el.dir_number] = el
                if el.dir_number != ROOT_DIR:
                    self._tree[el.dir_number] = el.containing_dir

    # -- addressing and raw I/O -----------------------------------------

    @property
    def last_eot_location(self) -> int:
        return self.last_eot.eot_location

    @property
    def owner(self) -> bytes:
        return self.first_eot.owners_name

    def address(self, ordinal: int, offset: int = 0) -> int:
        return self.scheme.from_index(ordinal, offset)

    def ordinal(self, addr: int) -> int:
        return self.scheme.linear_index(addr)

    def now(self) -> int:
        return self.clock()

    def read_block(self, ordinal: int) -> bytes:
        r = self.dev.read_block(ordinal)
        if not r.written:
            raise UnreadableBlock(f"block {ordinal} is {r.state.name.lower()}")
        return r.data

    def read_at(self, addr: int, n: int) -> bytes:
        pos = self.scheme.to_byte(addr)
        out = bytearray()
        while len(out) < n:
            ordinal, offset = divmod(pos + len(out), self.block_size)
            if ordinal >= self.next_write:
                raise UnreadableBlock(f"block {ordinal} lies beyond the written region")
            chunk = self.read_block(ordinal)[offset:]
            out += chunk[:n - len(out)]
        return bytes(out)

    def _read_record(self, addr: int, size_of: Callable[[bytes], int]) -> bytes:
        ordinal, offset = divmod(self.scheme.to_byte(addr), self.block_size)
        data = self.read_block(ordinal)[offset:]
        try:
            n = size_of(data)
        except fmt.Truncated:
            # size field straddles a block boundary
            data = self.read_at(addr, len(data) + self.block_size)
            n = size_of(data)
        if n > len(data):
            data = self.read_at(addr, n)
        return data[:n]

    def read_header(self, addr: int) -> FileHeader:
        return fmt.decode_fileheader(self._read_record(addr, fmt.fileheader_size), addr)

    def read_dir_list(self, addr: int) -> fmt.DirList:
        return fmt.decode_dir_list(self._read_record(addr, fmt.dir_list_size), addr)

    def read_directory(self, addr: int) -> fmt.Directory:
        return fmt.decode_directory(self._read_record(addr, fmt.directory_size))

    def read_filemap(self, addr: int) -> fmt.FileMap:
        return fmt.decode_filemap(self._read_record(addr, fmt.filemap_size))

    def header_chain(self, addr: int) -> Iterator[tuple[int, FileHeader]]:
        """Headers from ``addr`` back through previous_version_location."""
        limit = None
        while addr != NULL_ADDRESS:
            pos = self.scheme.to_byte(addr)
            if limit is not None and pos >= limit:
                raise FormatError("version chain does not move backwards")
            limit = pos
            header = self.read_header(addr)
            yield addr, header
            addr = header.backup.previous_version_location if header.backup else NULL_ADDRESS

    # -- appending ------------------------------------------------------

    def blocks_for(self, nbytes: int) -> int:
        return max(1, math.ceil(nbytes / self.block_size))

    def ensure_space(self, nblocks: int) -> None:
        if self.next_write + nblocks > self.capacity:
            raise MediaFull(f"need {nblocks} blocks, {self.capacity - self.next_write} left")

    def append(self, parts: Iterable) -> int:
        """Write ``parts`` starting at the next fresh block; return its address.

        Each part is ``bytes`` or a ``(binary file, length)`` pair streamed
        in block-sized pieces.  Callers check space with ``ensure_space``.
        """
        start = self.next_write
        buf = bytearray()
        bs = self.block_size

        def flush(final: bool) -> None:
            while len(buf) >= bs or (final and buf):
                self.dev.write_next(self.next_write, bytes(buf[:bs]))
                self.next_write += 1
                del buf[:bs]

        for part in parts:
            if isinstance(part, (bytes, bytearray, memoryview)):
                buf += part
                flush(False)
            else:
                stream, length = part
                remaining = length
                while remaining:
                    chunk = stream.read(min(remaining, 1 << 20))
                    if not chunk:
                        raise VolumeError("spooled content ended early")
                    remaining -= len(chunk)
                    buf += chunk
                    flush(False)
        if self.next_write == start and not buf:
            buf += b"\x00"
        flush(True)
        return self.address(start)

    # -- transaction bookkeeping ----------------------------------------

    def guard(self) -> None:
        """Refuse namespace mutations while a write stream is open."""
        if self.write_stream is not None:
            raise StreamBusy("a write stream is open")

    def begin(self) -> None:
        if not self.trans_open:
            self.trans_open = True
            self.trans_start = self.now()

    def mark_dirty(self, dirnum: int) -> None:
        self.begin()
        self.dirty.add(dirnum)

    def alloc_number(self) -> int:
        n = self.next_free_file_number
        self.next_free_file_number += 1
        return n

    # -- directory tree -------------------------------------------------

    def live_dirs(self) -> list[int]:
        return sorted(self._tree)

    def is_live_dir(self, dirnum: int) -> bool:
        return dirnum in self._tree

    def parent_of(self, dirnum: int) -> int:
        if dirnum not in self._tree:
            raise NotFound(f"no directory {dirnum}")
        return self._tree[dirnum]

    def depth(self, dirnum: int) -> int:
        d = 0
        while dirnum != ROOT_DIR:
            dirnum = self.parent_of(dirnum)
            d += 1
        return d

    def ancestors(self, dirnum: int) -> list[int]:
        """``dirnum`` and its ancestors up to the root."""
        out = [dirnum]
        while dirnum != ROOT_DIR:
            dirnum = self.parent_of(dirnum)
            out.append(dirnum)
        return out

    def element(self, dirnum: int) -> DirListElement | None:
        return self._elements.get(dirnum)

    def directory(self, dirnum: int) -> DirState:
        if dirnum not in self._tree:
            raise NotFound(f"no directory {dirnum}")
        ds = self._dirs.get(dirnum)
        if ds is None:
            el = self._elements.get(dirnum)
            if el is None:
                ds = DirState(dirnum, self._tree[dirnum], site=self.site)
            else:
                ds = self._load_dir(el)
            self._dirs[dirnum] = ds
        return ds

    def _load_dir(self, el: DirListElement) -> DirState:
        header = self.read_header(el.header_location)
        info = header.file_info
        if header.file_type != DIRECTORY_TYPE or info is None:
            raise FormatError(f"directory {el.dir_number} header is not a directory")
        record = self.read_directory(info.file_location)
        return DirState(el.dir_number, el.containing_dir, record.entries, el.header_location,
                        header.encoded_size, info.file_version_number, info.creation_time,
                        record.encoded_size, header.access, header.site, header.properties,
                        info.write_time)

    def add_dir(self, dirnum: int, parent: int, creation_time: int) -> DirState:
        self._tree[dirnum] = parent
        ds = DirState(dirnum, parent, creation_time=creation_time, site=self.site)
        self._dirs[dirnum] = ds
        self.mark_dirty(dirnum)
        return ds

    def subtree(self, dirnum: int) -> list[int]:
        children: dict[int, list[int]] = {}
        for d, p in self._tree.items():
            children.setdefault(p, []).append(d)
        out, stack = [], [dirnum]
        while stack:
            d = stack.pop()
            out.append(d)
            stack.extend(children.get(d, []))
        return out

    def drop_dir(self, dirnum: int) -> None:
        """Forget ``dirnum`` and everything below it (it is detached)."""
        if dirnum == ROOT_DIR:
            raise VolumeError("the root directory may not be removed")
        for d in self.subtree(dirnum):
            self._tree.pop(d, None)
            self._elements.pop(d, None)
            self._dirs.pop(d, None)
            self.dirty.discard(d)

    def restore_dirs(self, elements: list[DirListElement]) -> None:
        """Reinstate committed directories taken from an older directory list."""
        for el in elements:
            self._tree[el.dir_number] = el.containing_dir
            self._elements[el.dir_number] = replace(el)

    def path_components(self, dirnum: int) -> list[bytes]:
        names = []
        while dirnum != ROOT_DIR:
            parent = self.parent_of(dirnum)
            ds = self.directory(parent)
            for e in ds.entries:
                if e.file_number == dirnum and e.file_type == DIRECTORY_TYPE:
                    names.append(e.name)
                    break
            else:
                raise NotFound(f"directory {dirnum} has no entry in its parent")
            dirnum = parent
        return names[::-1]

    def backup_info(self, dirnum: int, name: bytes, previous: int = NULL_ADDRESS,
                    previous_size: int = 0) -> fmt.BackupInfo:
        prefix = b"".join(c + bytes([fmt.DOWN]) for c in self.path_components(dirnum))
        return fmt.BackupInfo(dirnum, previous, self.last_eot_location, len(prefix),
                              previous_size, prefix + name)

    @property
    def site(self) -> fmt.SiteInfo | None:
        if not self._site_loaded:
            self._site_loaded = True
            if ROOT_DIR in self._elements:
                try:
                    self._site = self.directory(ROOT_DIR).site
                except CdfsError:
                    self._site = None
        return self._site

    @site.setter
    def site(self, value: fmt.SiteInfo | None) -> None:
        self._site_loaded = True
        self._site = value

    # -- writing file versions ------------------------------------------

    def write_contiguous(self, header: FileHeader, content, length: int,
                         align: bool = False) -> tuple[int, FileHeader]:
        """Emit ``header`` followed by ``length`` content bytes.

        ``content`` is bytes or a binary file positioned at the data.  The
        header's file_info location and self-pointer are filled in here.
        """
        start = self.address(self.next_write)
        hsize = header.padded_size
        content_pos = self.scheme.to_byte(start) + hsize
        if align:
            content_pos = -(-content_pos // self.block_size) * self.block_size
        gap = content_pos - self.scheme.to_byte(start) - hsize
        self.ensure_space(self.blocks_for(content_pos + length - self.scheme.to_byte(start)))
        header.fileheader_location = start
        header.file_info.file_location = self.scheme.from_byte(content_pos)
        header.file_info.file_length = length
        encoded = fmt.encode_fileheader(header)
        body = content if isinstance(content, (bytes, bytearray)) else (content, length)
        self.append([encoded, bytes(gap), body])
        self.files_written += 1
        return start, header

    def write_fragmented(self, header: FileHeader, strips: list[fmt.Fragment],
                         new_strips: list[fmt.Fragment], data: bytes) -> tuple[int, FileHeader]:
        """Emit header, file map and ``data`` holding the bytes of ``new_strips``.

        ``new_strips`` are elements of ``strips``; they get consecutive
        locations starting right after the map, in the order given.
        """
        start = self.address(self.next_write)
        start_pos = self.scheme.to_byte(start)
        hsize = header.padded_size
        fmap = fmt.FileMap(strips)
        map_pos = start_pos + hsize
        strip_pos = map_pos + fmap.encoded_size
        self.ensure_space(self.blocks_for(strip_pos + len(data) - start_pos))
        for s in new_strips:
            s.loc = self.scheme.from_byte(strip_pos)
            strip_pos += s.valid_chars
        header.fileheader_location = start
        header.file_info.file_location = self.scheme.from_byte(map_pos)
        self.append([fmt.encode_fileheader(header), fmt.encode_filemap(fmap), data])
        self.files_written += 1
        return start, header

    def write_header(self, header: FileHeader) -> int:
        """Emit a header on its own (renames, links, relinked copies)."""
        self.ensure_space(self.blocks_for(header.padded_size))
        start = self.address(self.next_write)
        header.fileheader_location = start
        self.append([fmt.encode_fileheader(header)])
        return start

    # -- commit ---------------------------------------------------------

    def _dir_header(self, ds: DirState, now: int) -> FileHeader:
        if ds.number == ROOT_DIR:
            backup = fmt.BackupInfo(0, ds.header_location, self.last_eot_location, 0,
                                    ds.header_size, b"")
        else:
            comps = self.path_components(ds.number)
            backup = self.backup_info(ds.parent, comps[-1], ds.header_location, ds.header_size)
        info = fmt.FileInfo(NULL_ADDRESS, 0, now, ds.creation_time or now, ds.version + 1)
        return FileHeader(ds.number, DIRECTORY_TYPE, access=ds.access, backup=backup,
                          file_info=info, site=ds.site, properties=ds.properties)

    def commit(self) -> int:
        """Seal the open transaction; returns the address of the new EOT."""
        if self.write_stream is not None:
            raise StreamBusy("close the write stream before committing")
        if not self.trans_open:
            raise NoTransaction("nothing to commit")
        now = self.now()
        if ROOT_DIR not in self._elements:
            self.dirty.add(ROOT_DIR)
        dirty = [d for d in self.dirty if d in self._tree]
        affected: set[int] = set()
        for d in dirty:
            affected.update(self.ancestors(d))
        order = sorted(affected, key=lambda d: (-self.depth(d), d))
        write_order = [d for d in order if d in self.dirty]

        # Size everything up front so a full medium never leaves half a commit.
        needed = 0
        for d in write_order:
            ds = self.directory(d)
            needed += self.blocks_for(self._dir_header(ds, now).padded_size +
                                      fmt.DIRECTORY_INFO_SIZE + fmt.DIR_ENTRY_SIZE * len(ds.entries))
        live = set(self._tree)
        needed += self.blocks_for(fmt.DIRLIST_HEADER_SIZE + fmt.DIRLIST_ELEMENT_SIZE * len(live))
        self.ensure_space(needed + 1)

        rollup: dict[int, tuple[int, int]] = {}
        for d in order:
            ds = self.directory(d)
            if d in self.dirty:
                for i, e in enumerate(ds.entries):
                    if e.file_type == DIRECTORY_TYPE and e.file_number in self._tree:
                        child = self.directory(e.file_number) if e.file_number in self._dirs else None
                        el = self._elements.get(e.file_number)
                        mtime = rollup.get(e.file_number, (el.modify_time if el else e.modify_time, 0))[0]
                        ds.entries[i] = replace(
                            e, file_size=child.record_size if child else e.file_size,
                            file_version=child.version if child else e.file_version,
                            modify_time=max(e.modify_time, mtime))
                header = self._dir_header(ds, now)
                record = fmt.encode_directory(fmt.Directory(ds.entries))
                start = self.address(self.next_write)
                header.fileheader_location = start
                header.file_info.file_location = self.scheme.add_bytes(start, header.padded_size)
                header.file_info.file_length = len(record)
                self.append([fmt.encode_fileheader(header), record])
                ds.header_location = start
                ds.header_size = header.encoded_size
                ds.version += 1
                ds.record_size = len(record)
                ds.written_at = now
                ds.creation_time = header.file_info.creation_time
            contained, mtime = 0, ds.written_at
            for e in ds.entries:
                if e.file_type in (FILE_TYPE, FRAGMENTED_TYPE):
                    contained += e.file_size
                    mtime = max(mtime, e.modify_time)
                elif e.file_type == DIRECTORY_TYPE and e.file_number in self._tree:
                    if e.file_number in rollup:
                        c_bytes, c_time = rollup[e.file_number][1], rollup[e.file_number][0]
                    else:
                        el = self._elements.get(e.file_number)
                        c_bytes = el.contained_bytes if el else 0
                        c_time = el.modify_time if el else e.modify_time
                    contained += c_bytes
                    mtime = max(mtime, c_time)
                else:
                    mtime = max(mtime, e.modify_time)
            rollup[d] = (mtime, contained)
            self._elements[d] = DirListElement(d, ds.header_location, self._tree[d] if d != ROOT_DIR else 0,
                                               mtime, contained, ds.header_size)

        elements = [self._elements[d] for d in sorted(live)]
        dl_addr = self.address(self.next_write)
        dir_list = fmt.DirList(elements, dl_addr, self.last_eot.current_dir_list)
        self.append([fmt.encode_dir_list(dir_list)])

        eot_addr = self.address(self.next_write)
        eot = replace(
            self.last_eot, eot_location=eot_addr, current_dir_list=dl_addr,
            previous_eot_location=self.last_eot_location, next_eot_location=NULL_ADDRESS,
            trans_number=self.last_eot.trans_number + 1, trans_start_time=self.trans_start,
            trans_end_time=max(now, self.trans_start), files_written_on_trans=self.files_written,
            dirs_written_on_trans=len(write_order),
            next_free_file_number=self.next_free_file_number)
        self.append([fmt.encode_eot(eot)])

        self.last_eot = eot
        self.dir_list = dir_list
        self.dirty.clear()
        self.trans_open = False
        self.files_written = 0
        return eot_addr

    def abandon(self) -> None:
        """Drop uncommitted state; media keeps the orphaned blocks."""
        fresh = mount(self.dev, self.clock)
        self.__dict__.update(fresh.__dict__)

    def df(self) -> dict[str, int]:
        return self.dev.counts()


# -- lifecycle functions ----------------------------------------------------


def init_volume(dev: Device, owner: str | bytes = b"", site: fmt.SiteInfo | None = None,
                scheme: AddressScheme | None = None, clock: Clock | None = None,
                next_eot_location: int = NULL_ADDRESS) -> Volume:
    """Write the initial EOT to block 0 of a virgin device."""
    scheme = scheme or dev.scheme
    if scheme.block_size != dev.block_size:
        raise VolumeError("scheme offset modulo must equal the device block size")
    if dev.next_virgin != 0 or not dev.read_block(0).virgin:
        raise NotVirgin("device already holds data")
    clock = clock or system_clock
    now = clock()
    if isinstance(owner, str):
        owner = owner.encode("utf-8")
    eot = fmt.Eot(eot_location=scheme.from_index(0), filesystem_creation_time=now,
                  trans_number=0, trans_start_time=now, trans_end_time=now,
                  next_free_file_number=2, pointerdes=scheme.entries, owners_name=owner,
                  next_eot_location=next_eot_location)
    data = fmt.encode_eot(eot)
    if len(data) > dev.block_size:
        raise VolumeError("owner name does not fit in the first block")
    dev.write_next(0, data)
    v = Volume(dev, eot, eot, 1, clock)
    v.site = site
    return v


def _try_eot(dev: Device, scheme: AddressScheme, ordinal: int) -> fmt.Eot | None:
    r = dev.read_block(ordinal)
    if not r.written:
        return None
    try:
        return fmt.decode_eot(r.data, scheme.from_index(ordinal))
    except FormatError:
        return None


def recover(dev: Device, bad_tail: int, scheme: AddressScheme | None = None) -> int:
    """Scan back from ``bad_tail`` to the nearest valid EOT; return its address."""
    scheme = scheme or dev.scheme
    for ordinal in range(bad_tail - 1, -1, -1):
        if _try_eot(dev, scheme, ordinal) is not None:
            return scheme.from_index(ordinal)
    raise Unrecoverable("no valid EOT found on the media")


def _read_first_eot(dev: Device) -> fmt.Eot:
    r = dev.read_block(0)
    if not r.written:
        raise Unrecoverable("block 0 holds no EOT")
    try:
        first = fmt.decode_eot(r.data, 0)
        AddressScheme(first.pointerdes)
    except (FormatError, ValueError) as exc:
        raise Unrecoverable(f"block 0 is not a valid EOT: {exc}") from exc
    return first


def _search_tail(dev: Device, first: fmt.Eot, scheme: AddressScheme) -> int:
    capacity = min(dev.capacity, scheme.block_capacity)
    lo = 1
    if first.next_eot_location != NULL_ADDRESS:
        e = scheme.linear_index(first.next_eot_location)
        if e + 1 >= capacity or dev.read_block(e + 1).virgin:
            return e
        lo = e + 2
    virgin = dev.find_first_virgin(lo, capacity)
    return (capacity if virgin is None else virgin) - 1


def locate_last_eot(dev: Device, first: fmt.Eot) -> int:
    """Address of the last valid EOT, falling back to recovery if needed."""
    scheme = AddressScheme(first.pointerdes)
    tail = _search_tail(dev, first, scheme)
    if tail == 0 or _try_eot(dev, scheme, tail) is not None:
        return scheme.from_index(tail)
    return recover(dev, tail, scheme)


def mount(dev: Device, clock: Clock | None = None) -> Volume:
    before = dev.probes
    first = _read_first_eot(dev)
    scheme = AddressScheme(first.pointerdes)
    tail = _search_tail(dev, first, scheme)
    recovered = False
    if tail == 0:
        last = first
    else:
        last = _try_eot(dev, scheme, tail)
        if last is None:
            addr = recover(dev, tail, scheme)
            last = _try_eot(dev, scheme, scheme.linear_index(addr))
            recovered = True
    probes = dev.probes - before
    v = Volume(dev, first, last, tail + 1, clock)
    v.mount_probes = probes
    v.recovered = recovered
    return v


# -- fsck -------------------------------------------------------------------


def fsck(v: Volume) -> FsckReport:
    """Walk every reachable structure and classify every written block."""
    rep = FsckReport(next_write=v.next_write)
    bs = v.block_size
    scheme = v.scheme
    seen_headers: set[int] = set()
    seen_lists: set[int] = set()
    file_numbers: set[int] = set()
    dir_numbers: set[int] = set()

    def span(addr: int, nbytes: int) -> range:
        pos = scheme.to_byte(addr)
        return range(pos // bs, (pos + max(nbytes, 1) - 1) // bs + 1)

    def mark(ordinals: Iterable[int], kind: str) -> None:
        for o in ordinals:
            if o < v.next_write and o not in rep.blocks:
                rep.blocks[o] = Finding(o, kind, "ok")

    def fail(addr: int, kind: str, exc: Exception) -> None:
        status = {fmt.BadMagic: "bad-magic", fmt.BadChecksum: "bad-checksum",
                  fmt.LocationMismatch: "self-ref-mismatch"}.get(type(exc))
        if status is None:
            status = "unreadable" if isinstance(exc, UnreadableBlock) else "malformed"
        o = scheme.linear_index(addr) if addr != NULL_ADDRESS else -1
        finding = Finding(o, kind, status, str(exc))
        if status == "unreadable":
            rep.blocks.setdefault(o, finding)
        else:
            rep.problems.append(finding)

    def walk_header(addr: int, kind: str = "fileheader") -> None:
        while addr != NULL_ADDRESS and addr not in seen_headers:
            seen_headers.add(addr)
            try:
                h = v.read_header(addr)
            except (FormatError, UnreadableBlock) as exc:
                fail(addr, kind, exc)
                return
            rep.versions += 1
            mark(span(addr, h.encoded_size), kind)
            addr = h.backup.previous_version_location if h.backup else NULL_ADDRESS
            info = h.file_info
            if info is None:
                continue
            if h.file_type == FRAGMENTED_TYPE:
                try:
                    fmap = v.read_filemap(info.file_location)
                except (FormatError, UnreadableBlock) as exc:
                    fail(info.file_location, "filemap", exc)
                    continue
                mark(span(info.file_location, fmap.encoded_size), "filemap")
                for s in fmap.strips:
                    mark(span(s.loc, s.valid_chars), "content")
            elif h.file_type == DIRECTORY_TYPE:
                try:
                    record = v.read_directory(info.file_location)
                except (FormatError, UnreadableBlock) as exc:
                    fail(info.file_location, "directory", exc)
                    continue
                mark(span(info.file_location, record.encoded_size), "directory")
                for e in record.entries:
                    if e.file_type in (FILE_TYPE, FRAGMENTED_TYPE, fmt.SOFT_LINK_TYPE):
                        file_numbers.add(e.file_number)
                        walk_header(e.header_location)
            elif info.file_length:
                mark(span(info.file_location, info.file_length), "content")

    # The EOT chain, newest first.
    addr, expected = v.last_eot_location, None
    while addr != NULL_ADDRESS:
        o = scheme.linear_index(addr)
        try:
            eot = fmt.decode_eot(v.read_block(o), addr)
        except (FormatError, UnreadableBlock) as exc:
            fail(addr, "eot", exc)
            break
        mark([o], "eot")
        rep.chain_length += 1
        if expected is not None and eot.trans_number != expected:
            rep.problems.append(Finding(o, "eot", "chain-break",
                                        f"trans {eot.trans_number}, expected {expected}"))
        expected = eot.trans_number - 1
        dl_addr = eot.current_dir_list
        if dl_addr != NULL_ADDRESS and dl_addr not in seen_lists:
            seen_lists.add(dl_addr)
            try:
                dl = v.read_dir_list(dl_addr)
                mark(span(dl_addr, dl.encoded_size), "dirlist")
                for el in dl.elements:
                    dir_numbers.add(el.dir_number)
                    walk_header(el.header_location, "directory")
            except (FormatError, UnreadableBlock) as exc:
                fail(dl_addr, "dirlist", exc)
        if o == 0:
            if eot.trans_number != 0:
                rep.problems.append(Finding(0, "eot", "chain-break", "block 0 is not transaction 0"))
            break
        addr = eot.previous_eot_location
    else:
        rep.problems.append(Finding(-1, "eot", "chain-break", "chain does not reach block 0"))

    if v.first_eot.next_eot_location != NULL_ADDRESS:
        mark([0], "eot")
    for o in range(v.next_write):
        if o in rep.blocks:
            continue
        state = v.dev.state(o)
        if state is BlockState.DESTROYED:
            rep.blocks[o] = Finding(o, "unknown", "unreadable", "destroyed")
        else:
            rep.blocks[o] = Finding(o, "unknown", "orphaned")
    for o, f in rep.blocks.items():
        if f.status == "ok" and v.dev.state(o) is BlockState.DESTROYED:
            rep.blocks[o] = Finding(o, f.kind, "unreadable", "destroyed")
    rep.files = len(file_numbers)
    rep.dirs = len(dir_numbers)
    return rep


# -- compaction -------------------------------------------------------------


def compact(src: Volume, dst: Device, premaster: bool = False) -> Volume:
    """Copy the newest version of every live file and directory to ``dst``.

    Names, hierarchy, file numbers and header sections survive; version
    numbers restart at 1.  The result is a single transaction.  With
    ``premaster`` the first EOT points at that transaction's EOT so the
    image mounts without a search.
    """
    if dst.next_virgin != 0:
        raise NotVirgin("compaction needs a blank destination")
    if src.write_stream is not None:
        raise StreamBusy("close the write stream before compacting")
    if premaster:
        return _premaster(src, dst)
    try:
        return _compact_into(src, dst)
    except MediaFull as exc:
        raise MediaFull(f"destination too small for compaction: {exc}") from exc


def _compact_into(src: Volume, dst: Device, next_eot: int = NULL_ADDRESS) -> Volume:
    from . import fileio

    out = init_volume(dst, src.owner, src.site, src.scheme, src.clock, next_eot)
    out.begin()
    out.next_free_file_number = src.next_free_file_number
    stack = [ROOT_DIR]
    while stack:
        d = stack.pop()
        sds = src.directory(d)
        dds = out.directory(d)
        dds.access, dds.properties = sds.access, sds.properties
        if sds.site is not None:
            dds.site = sds.site
        dds.creation_time = sds.creation_time
        out.mark_dirty(d)
        for e in sds.entries:
            if e.file_type == DIRECTORY_TYPE:
                out.add_dir(e.file_number, d, src.directory(e.file_number).creation_time)
                dds.insert(replace(e, header_location=0, file_version=0, file_size=0))
                stack.append(e.file_number)
            elif e.file_type == ADDNAME_TYPE:
                dds.insert(replace(e))
            else:
                entry = fileio.copy_version(src, e, out, d)
                dds.insert(entry)
    out.commit()
    return out


def _premaster(src: Volume, dst: Device) -> Volume:
    import os
    import tempfile

    fd, scratch_path = tempfile.mkstemp(suffix=".cdsim")
    os.close(fd)
    os.unlink(scratch_path)
    try:
        with Device.open_or_create(scratch_path, dst.geometry) as scratch:
            trial = _compact_into(src, scratch)
            eot_addr = trial.last_eot_location
            end = trial.next_write
            first = replace(trial.first_eot, next_eot_location=eot_addr)
            if end > dst.capacity:
                raise MediaFull("destination too small for compaction")
            dst.write_next(0, fmt.encode_eot(first))
            for o in range(1, end):
                dst.write_next(o, scratch.read_block(o).data)
    finally:
        if os.path.exists(scratch_path):
            os.unlink(scratch_path)
    return mount(dst, src.clock)
