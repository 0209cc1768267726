"""Directory-level operations: create, look up, rename, delete, undelete,
destroy, addnames and soft links.

Directories are addressed by number (the root is 1) and entries by name.
Names may be given as ``str`` (UTF-8 encoded) or ``bytes``.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, replace

from . import format as fmt
from .device import NULL_ADDRESS
from .errors import (
    FormatError,
    InvalidName,
    LinkDepthExceeded,
    NameExists,
    NamespaceError,
    NoSuchVersion,
    NotFound,
    UnreadableBlock,
)
from .format import (
    ADDNAME_TYPE,
    DIRECTORY_TYPE,
    DOWN,
    FRAGMENTED_TYPE,
    ROOT_DIR,
    SOFT_LINK_TYPE,
    UP,
    DirEntry,
    FileHeader,
)
from .volume import DirState, Volume

MAX_LINK_DEPTH = 64


@dataclass
class ResolvedEntry:
    containing_dir: int
    file_number: int
    entry: DirEntry | None
    via_link_depth: int = 0
    version: int = 0

    @property
    def is_dir(self) -> bool:
        return self.entry is None or self.entry.file_type == DIRECTORY_TYPE

    @property
    def is_link(self) -> bool:
        return self.entry is not None and self.entry.file_type == SOFT_LINK_TYPE


@dataclass
class FileInfoView:
    """What CD_get_fileinfo returns.  ``header`` is None for the cheap view."""

    entry: DirEntry
    header_location: int
    header: FileHeader | None = None

    @property
    def file_info(self) -> fmt.FileInfo | None:
        return self.header.file_info if self.header else None

    @property
    def file_version_number(self) -> int:
        if self.header and self.header.file_info:
            return self.header.file_info.file_version_number
        return self.entry.file_version


def as_name(name: str | bytes) -> bytes:
    return name.encode("utf-8", "surrogateescape") if isinstance(name, str) else bytes(name)


def valid_name(name: str | bytes) -> bytes:
    raw = as_name(name)
    try:
        return fmt.validate_name(raw)
    except FormatError as exc:
        raise InvalidName(str(exc)) from None


# -- lookups ----------------------------------------------------------------


def primary_of(ds: DirState, entry: DirEntry) -> DirEntry:
    """The non-addname entry an addname stands for (or ``entry`` itself)."""
    if entry.file_type != ADDNAME_TYPE:
        return entry
    for e in ds.entries:
        if e.file_number == entry.file_number and e.file_type != ADDNAME_TYPE:
            return e
    raise NotFound(f"addname {entry.text_name!r} has no primary")


def addnames_of(ds: DirState, file_number: int) -> list[DirEntry]:
    return [e for e in ds.entries if e.file_type == ADDNAME_TYPE and e.file_number == file_number]


def get_entry(v: Volume, dirnum: int, name: str | bytes) -> DirEntry:
    ds = v.directory(dirnum)
    e = ds.get(as_name(name))
    if e is None:
        raise NotFound(f"no entry {as_name(name)!r} in directory {dirnum}")
    return e


def list_entries(v: Volume, dirnum: int, pattern: str = "") -> tuple[list[DirEntry], int]:
    """Entries in stored order; ``pattern`` is a shell-style glob on names."""
    entries = list(v.directory(dirnum).entries)
    if pattern:
        entries = [e for e in entries if fnmatch.fnmatchcase(e.text_name, pattern)]
    return entries, len(entries)


def dir_entry_of(v: Volume, dirnum: int) -> DirEntry | None:
    if dirnum == ROOT_DIR:
        return None
    parent = v.directory(v.parent_of(dirnum))
    for e in parent.entries:
        if e.file_number == dirnum and e.file_type == DIRECTORY_TYPE:
            return e
    raise NotFound(f"directory {dirnum} has no entry in its parent")


def path_of_dir(v: Volume, dirnum: int, delim: str = "/", replace_with: str = "\\") -> str:
    comps = [c.decode("utf-8", "surrogateescape").replace(delim, replace_with)
             for c in v.path_components(dirnum)]
    return delim + delim.join(comps)


# -- version chains ---------------------------------------------------------


def _chain_start(v: Volume, dirnum: int, entry: DirEntry) -> int:
    if entry.file_type == DIRECTORY_TYPE:
        ds = v.directory(entry.file_number)
        if ds.header_location == NULL_ADDRESS:
            raise NoSuchVersion("directory has not been committed yet")
        return ds.header_location
    return entry.header_location


def history(v: Volume, dirnum: int, name: str | bytes) -> list[tuple[int, FileHeader]]:
    """Every header of the entry, newest first."""
    ds = v.directory(dirnum)
    entry = primary_of(ds, get_entry(v, dirnum, name))
    return list(v.header_chain(_chain_start(v, dirnum, entry)))


def _version_of(header: FileHeader) -> int:
    return header.file_info.file_version_number if header.file_info else 1


def find_version(v: Volume, start: int, version: int) -> tuple[int, FileHeader]:
    if version == 0:
        return start, v.read_header(start)
    for addr, header in v.header_chain(start):
        if _version_of(header) == version:
            return addr, header
    raise NoSuchVersion(f"version {version} not found")


def file_info(v: Volume, dirnum: int, name: str | bytes, version: int = 0,
              want_full: bool = False) -> FileInfoView:
    ds = v.directory(dirnum)
    entry = primary_of(ds, get_entry(v, dirnum, name))
    if version == 0 and not want_full:
        return FileInfoView(entry, entry.header_location)
    addr, header = find_version(v, _chain_start(v, dirnum, entry), version)
    return FileInfoView(entry, addr, header)


# -- mutations ----------------------------------------------------------------


def mkdir(v: Volume, parent: int, name: str | bytes) -> int:
    v.guard()
    raw = valid_name(name)
    pds = v.directory(parent)
    if pds.get(raw) is not None:
        raise NameExists(f"{raw!r} already exists")
    now = v.now()
    number = v.alloc_number()
    pds.insert(DirEntry(raw, 0, now, number, 0, 0, DIRECTORY_TYPE, 0, 0))
    v.add_dir(number, parent, now)
    v.mark_dirty(parent)
    return number


def _detach(v: Volume, ds: DirState, entry: DirEntry) -> None:
    primary = primary_of(ds, entry)
    for e in addnames_of(ds, primary.file_number):
        ds.remove(e.name)
    ds.remove(primary.name)
    if primary.file_type == DIRECTORY_TYPE:
        v.drop_dir(primary.file_number)
    v.mark_dirty(ds.number)


def delete_entry(v: Volume, dirnum: int, name: str | bytes = "") -> None:
    """Detach an entry; an empty name detaches directory ``dirnum`` itself.

    Deleting an addname drops just that name.  Deleting a primary name that
    has addnames promotes one of them, so the file survives.
    """
    v.guard()
    if not as_name(name):
        if dirnum == ROOT_DIR:
            raise NamespaceError("the root directory may not be deleted")
        entry = dir_entry_of(v, dirnum)
        dirnum = v.parent_of(dirnum)
    else:
        entry = get_entry(v, dirnum, name)
    ds = v.directory(dirnum)
    if entry.file_type == ADDNAME_TYPE or addnames_of(ds, entry.file_number):
        remove_addname(v, dirnum, entry.name)
    else:
        _detach(v, ds, entry)


def _copy_header(v: Volume, dirnum: int, name: bytes, base_addr: int, base: FileHeader,
                 previous: int | None = None, bump: bool = False, **changes) -> tuple[int, FileHeader]:
    """Write a copy of ``base`` chained to ``previous`` (default: ``base`` itself).

    With ``bump`` the copy becomes the next version of the file.
    """
    if previous is None:
        previous = base_addr
    prev_size = v.read_header(previous).encoded_size if previous != NULL_ADDRESS else 0
    if bump and base.file_info is not None:
        changes["file_info"] = replace(base.file_info,
                                       file_version_number=base.file_info.file_version_number + 1)
    header = replace(base, backup=v.backup_info(dirnum, name, previous, prev_size), **changes)
    addr = v.write_header(header)
    return addr, header


def _entry_from_header(name: bytes, addr: int, header: FileHeader, addname_count: int = 0,
                       file_size: int | None = None) -> DirEntry:
    info = header.file_info
    if header.file_type == SOFT_LINK_TYPE:
        return DirEntry(name, addr, header.soft_link.creation_time, header.file_number, 0, 1,
                        SOFT_LINK_TYPE, header.encoded_size, addname_count)
    size = info.file_length if file_size is None else file_size
    return DirEntry(name, addr, info.write_time, header.file_number, size,
                    info.file_version_number, header.file_type, header.encoded_size, addname_count)


def rename_entry(v: Volume, dirnum: int, old: str | bytes, new: str | bytes) -> None:
    v.guard()
    ds = v.directory(dirnum)
    new_raw = valid_name(new)
    entry = get_entry(v, dirnum, old)
    if ds.get(new_raw) is not None:
        raise NameExists(f"{new_raw!r} already exists")
    if entry.file_type == ADDNAME_TYPE:
        ds.replace_entry(entry.name, replace(entry, name=new_raw))
    elif entry.file_type == DIRECTORY_TYPE:
        ds.replace_entry(entry.name, replace(entry, name=new_raw))
        v.mark_dirty(entry.file_number)
    else:
        base = v.read_header(entry.header_location)
        addr, header = _copy_header(v, dirnum, new_raw, entry.header_location, base, bump=True)
        version = header.file_info.file_version_number if header.file_info else entry.file_version
        ds.replace_entry(entry.name, replace(entry, name=new_raw, header_location=addr,
                                             header_size=header.encoded_size,
                                             file_version=version))
    v.mark_dirty(dirnum)


def _older_dir_lists(v: Volume):
    addr = v.last_eot.current_dir_list
    while addr != NULL_ADDRESS:
        dl = v.read_dir_list(addr)
        yield dl
        addr = dl.prev_dir_list


def _restore_directory(v: Volume, dir_number: int, parent: int, new_number: int | None) -> int:
    for dl in _older_dir_lists(v):
        by_num = {el.dir_number: el for el in dl.elements}
        if dir_number not in by_num:
            continue
        children: dict[int, list[int]] = {}
        for el in dl.elements:
            children.setdefault(el.containing_dir, []).append(el.dir_number)
        picked, stack = [], [dir_number]
        while stack:
            d = stack.pop()
            if v.is_live_dir(d):
                raise NamespaceError(f"directory {d} is already live")
            picked.append(replace(by_num[d]))
            stack.extend(children.get(d, []))
        picked[0].containing_dir = parent
        if new_number is not None:
            for el in picked:
                if el.containing_dir == dir_number:
                    el.containing_dir = new_number
            picked[0].dir_number = new_number
        v.restore_dirs(picked)
        if new_number is not None:
            v.mark_dirty(new_number)
            for el in picked[1:]:
                if el.containing_dir == new_number:
                    v.mark_dirty(el.dir_number)
        return picked[0].dir_number
    raise NotFound(f"directory {dir_number} is in no earlier directory list")


def undelete_entry(v: Volume, dirnum: int, name: str | bytes, version: int = 0,
                   assign_new_number: bool = False) -> ResolvedEntry:
    """Reattach ``name`` from an earlier version of directory ``dirnum``."""
    v.guard()
    raw = as_name(name)
    ds = v.directory(dirnum)
    if ds.get(raw) is not None:
        raise NameExists(f"{raw!r} is present; nothing to undelete")
    found = None
    if ds.header_location != NULL_ADDRESS:
        for _, header in v.header_chain(ds.header_location):
            record = v.read_directory(header.file_info.file_location)
            for e in record.entries:
                if e.name == raw and e.file_type != ADDNAME_TYPE:
                    found = e
                    break
            if found:
                break
    if found is None:
        raise NotFound(f"{raw!r} never existed in directory {dirnum}")

    if found.file_type == DIRECTORY_TYPE:
        new_number = v.alloc_number() if assign_new_number else None
        number = _restore_directory(v, found.file_number, dirnum, new_number)
        entry = replace(found, file_number=number, addname_count=0)
    else:
        addr, header = find_version(v, found.header_location, version)
        if assign_new_number:
            number = v.alloc_number()
            info = replace(header.file_info, file_version_number=1) if header.file_info else None
            addr, header = _copy_header(v, dirnum, raw, addr, header, previous=NULL_ADDRESS,
                                        file_number=number, file_info=info)
        size = found.file_size if addr == found.header_location else None
        if header.file_type == FRAGMENTED_TYPE and size is None:
            from .fileio import valid_bytes
            size = valid_bytes(v.read_filemap(header.file_info.file_location).strips)
        entry = _entry_from_header(raw, addr, header, 0, size)
    ds.insert(entry)
    v.mark_dirty(dirnum)
    return ResolvedEntry(dirnum, entry.file_number, entry)


def add_addname(v: Volume, dirnum: int, primary: str | bytes, addname: str | bytes) -> None:
    v.guard()
    ds = v.directory(dirnum)
    raw = valid_name(addname)
    p = get_entry(v, dirnum, primary)
    if p.file_type == ADDNAME_TYPE:
        raise NamespaceError(f"{p.text_name!r} is itself an addname")
    if ds.get(raw) is not None:
        raise NameExists(f"{raw!r} already exists")
    ds.insert(DirEntry(raw, 0, v.now(), p.file_number, 0, 0, ADDNAME_TYPE, 0, 0))
    ds.replace_entry(p.name, replace(p, addname_count=p.addname_count + 1))
    v.mark_dirty(dirnum)


def remove_addname(v: Volume, dirnum: int, name: str | bytes) -> None:
    """Remove one name of a file.  Removing the primary promotes an addname."""
    v.guard()
    ds = v.directory(dirnum)
    e = get_entry(v, dirnum, name)
    if e.file_type == ADDNAME_TYPE:
        p = primary_of(ds, e)
        ds.remove(e.name)
        ds.replace_entry(p.name, replace(p, addname_count=max(0, p.addname_count - 1)))
        v.mark_dirty(dirnum)
        return
    extra = addnames_of(ds, e.file_number)
    if not extra:
        raise NamespaceError(f"{e.text_name!r} is the only name of its file")
    heir = extra[0]
    ds.remove(heir.name)
    ds.replace_entry(e.name, replace(e, addname_count=len(extra) - 1))
    rename_entry(v, dirnum, e.name, heir.name)


# -- soft links ---------------------------------------------------------------


def split_target(target: bytes, strict: bool = True) -> list:
    """Tokenize a link target into names and the DOWN/UP delimiters."""
    tokens: list = []
    name = bytearray()
    for b in target:
        if b in (DOWN, UP):
            if name:
                tokens.append(bytes(name))
                name.clear()
            elif b == DOWN and strict:
                raise InvalidName("down delimiter must follow a name")
            tokens.append(b)
        elif b == 0:
            raise InvalidName("NUL in link target")
        else:
            name.append(b)
    if name:
        tokens.append(bytes(name))
    for t in tokens:
        if isinstance(t, bytes) and len(t) > fmt.MAX_NAME_LEN:
            raise InvalidName(f"link target component longer than {fmt.MAX_NAME_LEN} bytes")
    if strict and not tokens:
        raise InvalidName("empty link target")
    return tokens


def make_link(v: Volume, dirnum: int, name: str | bytes, target_dir: int,
              target: str | bytes, target_version: int = 0) -> DirEntry:
    v.guard()
    ds = v.directory(dirnum)
    raw = valid_name(name)
    target = as_name(target)
    split_target(target)
    if ds.get(raw) is not None:
        raise NameExists(f"{raw!r} already exists")
    now = v.now()
    number = v.alloc_number()
    header = FileHeader(number, SOFT_LINK_TYPE, backup=v.backup_info(dirnum, raw),
                        soft_link=fmt.SoftLinkInfo(now, target_dir, target_version, target),
                        site=v.site)
    addr = v.write_header(header)
    entry = DirEntry(raw, addr, now, number, 0, 1, SOFT_LINK_TYPE, header.encoded_size, 0)
    ds.insert(entry)
    v.mark_dirty(dirnum)
    return entry


def _dir_resolved(v: Volume, dirnum: int, depth: int) -> ResolvedEntry:
    if dirnum == ROOT_DIR:
        return ResolvedEntry(0, ROOT_DIR, None, depth)
    return ResolvedEntry(v.parent_of(dirnum), dirnum, dir_entry_of(v, dirnum), depth)


def _lookup(v: Volume, cur: int, name: bytes, depth: int, follow: bool) -> ResolvedEntry:
    ds = v.directory(cur)
    e = ds.get(name)
    if e is None:
        raise NotFound(f"no entry {name!r} in directory {cur}")
    e = primary_of(ds, e)
    r = ResolvedEntry(cur, e.file_number, e, depth)
    if follow and e.file_type == SOFT_LINK_TYPE:
        r = resolve_link(v, r)
    return r


def _parent_step(v: Volume, cur: int) -> int:
    if cur == ROOT_DIR:
        raise NotFound("path escapes above the root directory")
    return v.parent_of(cur)


def _evaluate(v: Volume, start: int, tokens: list, depth: int, follow_final: bool) -> ResolvedEntry:
    """Walk DOWN/UP-delimited tokens from directory ``start``.

    A name followed by DOWN must be a directory and becomes current.  UP
    after a name selects the directory containing that name; UP anywhere
    else (leading, repeated, or after DOWN) steps to the parent.
    """
    if not v.is_live_dir(start):
        raise NotFound(f"no directory {start}")
    cur, pending = start, None
    for tok in tokens:
        if isinstance(tok, bytes):
            pending = tok
        elif tok == DOWN:
            if pending is None:
                continue
            r = _lookup(v, cur, pending, depth, follow=True)
            depth = r.via_link_depth
            if not r.is_dir:
                raise NotFound(f"{pending!r} is not a directory")
            cur, pending = r.file_number, None
        else:
            if pending is None:
                cur = _parent_step(v, cur)
            else:
                r = _lookup(v, cur, pending, depth, follow=True)
                depth = r.via_link_depth
                cur = r.containing_dir if r.file_number != ROOT_DIR else _parent_step(v, ROOT_DIR)
                pending = None
    if pending is not None:
        return _lookup(v, cur, pending, depth, follow=follow_final)
    return _dir_resolved(v, cur, depth)


def resolve_link(v: Volume, link: ResolvedEntry) -> ResolvedEntry:
    """Follow a soft link (recursively) to its ultimate target."""
    depth = link.via_link_depth + 1
    if depth > MAX_LINK_DEPTH:
        raise LinkDepthExceeded(f"more than {MAX_LINK_DEPTH} soft links")
    header = v.read_header(link.entry.header_location)
    sl = header.soft_link
    if sl is None:
        raise NamespaceError("entry is not a soft link")
    r = _evaluate(v, sl.target_dir, split_target(sl.target_name), depth, follow_final=True)
    if sl.target_version:
        r.version = sl.target_version
    return r


def _path_tokens(path: str, downdir: str, updir: str, updir_is_dir: bool) -> list:
    if updir_is_dir:
        tokens: list = []
        for comp in path.split(downdir):
            if comp == updir:
                tokens.append(UP)
            elif comp:
                tokens += [as_name(comp), DOWN]
        if tokens and tokens[-1] == DOWN and not path.endswith(downdir):
            tokens.pop()
        return tokens
    tokens, name, i = [], "", 0
    while i < len(path):
        if path.startswith(downdir, i):
            tokens += ([as_name(name)] if name else []) + [DOWN]
            name, i = "", i + len(downdir)
        elif path.startswith(updir, i):
            tokens += ([as_name(name)] if name else []) + [UP]
            name, i = "", i + len(updir)
        else:
            name += path[i]
            i += 1
    if name:
        tokens.append(as_name(name))
    return tokens


def resolve_path(v: Volume, path: str, context: int = ROOT_DIR, downdir: str = "/",
                 updir: str = "..", updir_is_dir: bool = False) -> ResolvedEntry:
    """Resolve a textual path; soft links are followed except in the last component."""
    start = context
    if path.startswith(downdir):
        start, path = ROOT_DIR, path[len(downdir):]
    tokens = _path_tokens(path, downdir, updir, updir_is_dir)
    for t in tokens:
        if isinstance(t, bytes):
            valid_name(t)
    return _evaluate(v, start, tokens, 0, follow_final=False)


def split_path(v: Volume, path: str, context: int = ROOT_DIR) -> tuple[int, bytes]:
    """Resolve everything but the last component; return (directory, name)."""
    path = path.rstrip("/") if path != "/" else path
    head, _, tail = path.rpartition("/")
    if not tail or tail == "..":
        raise InvalidName(f"{path!r} does not end in an entry name")
    if not head:
        parent = ROOT_DIR if path.startswith("/") else context
    else:
        r = resolve_path(v, head + "/", context)
        parent = r.file_number
    return parent, valid_name(tail)


# -- destroy ------------------------------------------------------------------


def _span(v: Volume, addr: int, nbytes: int) -> set[int]:
    pos = v.scheme.to_byte(addr)
    bs = v.block_size
    return set(range(pos // bs, (pos + max(nbytes, 1) - 1) // bs + 1))


def referenced_blocks(v: Volume, addr: int, header: FileHeader) -> set[int]:
    """Every block a version needs to be read: header, map, strips, content."""
    blocks = _span(v, addr, header.encoded_size)
    info = header.file_info
    if info is None:
        return blocks
    if header.file_type == FRAGMENTED_TYPE:
        fmap = v.read_filemap(info.file_location)
        blocks |= _span(v, info.file_location, fmap.encoded_size)
        for s in fmap.strips:
            blocks |= _span(v, s.loc, s.valid_chars)
    elif header.file_type == DIRECTORY_TYPE:
        blocks |= _span(v, info.file_location, info.file_length)
    elif info.file_length:
        blocks |= _span(v, info.file_location, info.file_length)
    return blocks


def _destroy_blocks(v: Volume, ordinals: set[int]) -> None:
    from .device import BlockState

    for o in sorted(ordinals):
        if v.dev.state(o) is BlockState.WRITTEN:
            v.dev.destroy_block(o)


def destroy(v: Volume, dirnum: int, name: str | bytes = "", version: int = 0) -> None:
    """Overwrite the blocks of one version (or all versions when 0)."""
    v.guard()
    if not as_name(name):
        if dirnum == ROOT_DIR:
            raise NamespaceError("the root directory may not be destroyed")
        if version:
            raise NamespaceError("directories can only be destroyed as a whole")
        ds = v.directory(dirnum)
        doomed: set[int] = set()
        if ds.header_location != NULL_ADDRESS:
            for addr, header in v.header_chain(ds.header_location):
                doomed |= referenced_blocks(v, addr, header)
        delete_entry(v, dirnum)
        _destroy_blocks(v, doomed)
        return

    ds = v.directory(dirnum)
    entry = primary_of(ds, get_entry(v, dirnum, name))
    if entry.file_type == DIRECTORY_TYPE:
        destroy(v, entry.file_number, "", version)
        return
    chain = []
    try:
        chain = list(v.header_chain(entry.header_location))
    except (FormatError, UnreadableBlock):
        if version:
            raise
    targets = [i for i, (_, h) in enumerate(chain) if version == 0 or _version_of(h) == version]
    if version and not targets:
        raise NoSuchVersion(f"version {version} not found")
    doomed, kept = set(), set()
    for i, (addr, header) in enumerate(chain):
        (doomed if i in targets else kept).update(referenced_blocks(v, addr, header))
    survivors = [i for i in range(len(chain)) if i not in targets]
    if not survivors:
        _detach(v, ds, entry)
        _destroy_blocks(v, doomed - kept)
        return

    # Rebuild the chain above the oldest destroyed header so it skips them.
    low = max(targets)
    below = chain[low + 1][0] if low + 1 < len(chain) else NULL_ADDRESS
    newest_addr = below
    for i in reversed([i for i in survivors if i < low]):
        addr, header = chain[i]
        newest_addr, _ = _copy_header(v, dirnum, entry.name, addr, header, previous=newest_addr)
    _destroy_blocks(v, doomed - kept)
    header = v.read_header(newest_addr)
    size = None
    if header.file_type == FRAGMENTED_TYPE:
        from .fileio import valid_bytes
        size = valid_bytes(v.read_filemap(header.file_info.file_location).strips)
    ds.replace_entry(entry.name, _entry_from_header(entry.name, newest_addr, header,
                                                    entry.addname_count, size))
    v.mark_dirty(dirnum)


def link_target(path: str, context: int = ROOT_DIR, downdir: str = "/",
                updir: str = "..") -> tuple[int, bytes]:
    """Turn a textual path into (target_dir, delimiter-encoded target)."""
    if path.startswith(downdir):
        context, path = ROOT_DIR, path[len(downdir):]
    tokens = _path_tokens(path, downdir, updir, False)
    out = bytearray()
    for t in tokens:
        if isinstance(t, bytes):
            out += valid_name(t)
        elif t == UP or out[-1:] not in (b"", bytes([DOWN]), bytes([UP])):
            out.append(t)
    return context, bytes(out)
