"""Command-line front end: ``cdfs IMAGE COMMAND [ARGS]``.

Each invocation mounts the image, runs one command (or a script of them)
and commits a single transaction if anything changed.  Exit status is 0 on
success, 1 when an operation fails and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import platform
import shlex
import sys
from pathlib import Path

from . import fileio
from . import format as fmt
from . import namespace as ns
from .device import AddressScheme, Device, DeviceGeometry
from .errors import CdfsError, Truncated
from .format import DIRECTORY_TYPE, FILE_TYPES, ROOT_DIR
from .volume import Volume, compact, fsck, init_volume, mount


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        command = self.prog.split()[-1]
        raise UsageError(message if command == "cdfs" else f"{command}: {message}")


def _version_opt(p: argparse.ArgumentParser) -> None:
    p.add_argument("--version", type=int, default=0, help="version number, 0 for newest")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdfs", description="Inspect and edit CDFS simulator images.")
    parser.add_argument("image", help="simulator image file")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    add_command_parsers(sub)
    return parser


def add_command_parsers(sub) -> None:
    p = sub.add_parser("init", help="create and initialize an image")
    p.add_argument("--capacity-blocks", type=int, default=16384)
    p.add_argument("--block-size", type=int, default=2048)
    p.add_argument("--scheme", help="address fields as modulo:bits,... (last is the offset)")
    p.add_argument("--owner", default="")
    p.add_argument("--site", help="site name stored in every header")

    p = sub.add_parser("ls", help="list a directory")
    p.add_argument("--long", "-l", action="store_true")
    p.add_argument("path", nargs="?", default="/")
    sub.add_parser("tree", help="print the whole hierarchy")

    p = sub.add_parser("put", help="import a native file")
    p.add_argument("native")
    p.add_argument("cdpath")
    p.add_argument("--align", action="store_true", help="start content on a block boundary")
    p.add_argument("--preserve", action="store_true", help="keep modify time and ownership")

    p = sub.add_parser("get", help="export a file version")
    p.add_argument("cdpath")
    p.add_argument("native")
    _version_opt(p)
    p.add_argument("--preserve", action="store_true")

    p = sub.add_parser("cat", help="write a file version to stdout")
    p.add_argument("cdpath")
    _version_opt(p)

    p = sub.add_parser("mkdir")
    p.add_argument("path")
    p = sub.add_parser("rm", help="detach an entry (history stays)")
    p.add_argument("path")
    p = sub.add_parser("mv", help="rename within a directory")
    p.add_argument("old")
    p.add_argument("new")

    p = sub.add_parser("undelete")
    p.add_argument("dirpath")
    p.add_argument("name")
    _version_opt(p)
    p.add_argument("--new-number", action="store_true")

    p = sub.add_parser("ln", help="create a soft link")
    p.add_argument("target")
    p.add_argument("linkpath")
    _version_opt(p)

    p = sub.add_parser("addname", help="give a file another name in its directory")
    p.add_argument("primarypath")
    p.add_argument("name")

    p = sub.add_parser("history", help="list every version of a file")
    p.add_argument("cdpath")

    p = sub.add_parser("destroy", help="overwrite the blocks of a version")
    p.add_argument("cdpath")
    _version_opt(p)

    p = sub.add_parser("fsck")
    p.add_argument("--verbose", "-v", action="store_true")

    p = sub.add_parser("compact", help="copy live state to a new image")
    p.add_argument("dst_image")
    p.add_argument("--premaster", action="store_true",
                   help="point the first EOT at the final one")

    p = sub.add_parser("dump", help="decode the record at an address")
    p.add_argument("address", help="dotted address, block ordinal, or last-eot")
    p.add_argument("--as", dest="kind", choices=["auto", "directory", "filemap"], default="auto")

    sub.add_parser("df", help="block counts")

    p = sub.add_parser("script", help="run commands from a file in one transaction")
    p.add_argument("file")


# -- helpers ------------------------------------------------------------------


def _time(ts: int) -> str:
    return fmt.from_timestamp(ts).strftime("%Y-%m-%d %H:%M:%S")


def _type_name(t: int) -> str:
    return FILE_TYPES.get(t, "?").lower()


def parse_scheme(text: str) -> AddressScheme:
    pairs = []
    for item in text.split(","):
        modulo, _, bits = item.partition(":")
        pairs.append((int(modulo), int(bits)))
    return AddressScheme(tuple(pairs))


def _dir_of(v: Volume, path: str) -> int:
    r = ns.resolve_path(v, path)
    if r.is_link:
        r = ns.resolve_link(v, r)
    if not r.is_dir:
        raise ns.NamespaceError(f"{path}: not a directory")
    return r.file_number


def _entry_line(e: fmt.DirEntry, long: bool) -> str:
    name = e.text_name + ("/" if e.file_type == DIRECTORY_TYPE else "")
    if not long:
        return name
    return (f"{_type_name(e.file_type):<10} {e.file_number:>6} v{e.file_version:<4} "
            f"{e.file_size:>10} {_time(e.modify_time)} {name}")


# -- commands -----------------------------------------------------------------


def cmd_ls(v: Volume, a, out) -> None:
    r = ns.resolve_path(v, a.path)
    if r.is_dir:
        entries, _ = ns.list_entries(v, r.file_number)
        for e in entries:
            print(_entry_line(e, a.long), file=out)
    else:
        print(_entry_line(r.entry, a.long), file=out)


def cmd_tree(v: Volume, a, out) -> None:
    def walk(d: int, indent: str) -> None:
        for e in v.directory(d).entries:
            print(indent + _entry_line(e, False), file=out)
            if e.file_type == DIRECTORY_TYPE:
                walk(e.file_number, indent + "  ")

    print("/", file=out)
    walk(ROOT_DIR, "  ")


def cmd_put(v: Volume, a, out) -> None:
    d, name = ns.split_path(v, a.cdpath)
    fileio.import_file(v, a.native, d, name, a.align, a.preserve)


def _open(v: Volume, path: str, version: int):
    return fileio.open_resolved(v, ns.resolve_path(v, path), version)


def cmd_get(v: Volume, a, out) -> None:
    d, name = ns.split_path(v, a.cdpath)
    fileio.export_file(v, d, name, a.version, a.native, a.preserve)


def cmd_cat(v: Volume, a, out) -> None:
    with _open(v, a.cdpath, a.version) as s:
        if s.holes:
            raise fileio.HoleError(s.holes[0][0])
        sink = getattr(out, "buffer", None)
        while chunk := s.read(1 << 20):
            if sink is not None:
                sink.write(chunk)
            else:
                out.write(chunk.decode("utf-8", "replace"))
        if sink is not None:
            sink.flush()


def cmd_mkdir(v: Volume, a, out) -> None:
    d, name = ns.split_path(v, a.path)
    ns.mkdir(v, d, name)


def cmd_rm(v: Volume, a, out) -> None:
    d, name = ns.split_path(v, a.path)
    ns.delete_entry(v, d, name)


def cmd_mv(v: Volume, a, out) -> None:
    d1, old = ns.split_path(v, a.old)
    d2, new = ns.split_path(v, a.new)
    if d1 != d2:
        raise ns.NamespaceError("mv renames within one directory only")
    ns.rename_entry(v, d1, old, new)


def cmd_undelete(v: Volume, a, out) -> None:
    ns.undelete_entry(v, _dir_of(v, a.dirpath), a.name, a.version, a.new_number)


def cmd_ln(v: Volume, a, out) -> None:
    d, name = ns.split_path(v, a.linkpath)
    target_dir, target = ns.link_target(a.target, d)
    ns.make_link(v, d, name, target_dir, target, a.version)


def cmd_addname(v: Volume, a, out) -> None:
    d, name = ns.split_path(v, a.primarypath)
    ns.add_addname(v, d, name, a.name)


def cmd_history(v: Volume, a, out) -> None:
    d, name = ns.split_path(v, a.cdpath)
    for addr, h in ns.history(v, d, name):
        info = h.file_info
        if info is None:
            print(f"link {v.scheme.format(addr)}", file=out)
            continue
        print(f"version {info.file_version_number} {_time(info.write_time)} "
              f"length {info.file_length} {_type_name(h.file_type)} header {v.scheme.format(addr)}",
              file=out)


def cmd_destroy(v: Volume, a, out) -> None:
    d, name = ns.split_path(v, a.cdpath)
    ns.destroy(v, d, name, a.version)


def cmd_fsck(v: Volume, a, out) -> int:
    report = fsck(v)
    print(report.render(a.verbose), file=out)
    return 0 if report.clean else 1


def cmd_compact(v: Volume, a, out) -> None:
    with Device.open_or_create(a.dst_image, v.dev.geometry) as dst:
        result = compact(v, dst, a.premaster)
        print(f"compacted {v.next_write} blocks into {result.next_write}", file=out)


def cmd_dump(v: Volume, a, out) -> None:
    if a.address == "last-eot":
        addr = v.last_eot_location
    else:
        addr = v.scheme.parse(a.address)
    decoders = {"auto": lambda data: fmt.decode_any(data, addr),
                "directory": fmt.decode_directory, "filemap": fmt.decode_filemap}
    decode = decoders[a.kind]
    ordinal = v.ordinal(addr)
    nblocks = 1
    while True:
        avail = (v.next_write - ordinal) * v.block_size - v.scheme.offset_of(addr)
        data = v.read_at(addr, max(0, min(nblocks * v.block_size, avail)))
        try:
            record = decode(data)
            break
        except Truncated:
            if nblocks * v.block_size >= avail:
                raise
            nblocks *= 2
    print(f"address = {v.scheme.format(addr)}", file=out)
    print(fmt.render(record, v.scheme.format), file=out)


def cmd_df(v: Volume, a, out) -> None:
    for key, n in v.df().items():
        print(f"{key} {n}", file=out)


COMMANDS = {
    "ls": cmd_ls, "tree": cmd_tree, "put": cmd_put, "get": cmd_get, "cat": cmd_cat,
    "mkdir": cmd_mkdir, "rm": cmd_rm, "mv": cmd_mv, "undelete": cmd_undelete, "ln": cmd_ln,
    "addname": cmd_addname, "history": cmd_history, "destroy": cmd_destroy, "fsck": cmd_fsck,
    "compact": cmd_compact, "dump": cmd_dump, "df": cmd_df,
}


def _script_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="script")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    add_command_parsers(sub)
    return parser


def run_script(v: Volume, path: str, out) -> int:
    parser = _script_parser()
    status = 0
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        words = shlex.split(line, comments=True)
        if not words:
            continue
        if words[0] in ("init", "script"):
            raise UsageError(f"{path}:{lineno}: {words[0]} is not allowed in a script")
        a = parser.parse_args(words)
        status = max(status, COMMANDS[a.command](v, a, out) or 0)
    return status


def cmd_init(a, out) -> None:
    scheme = parse_scheme(a.scheme) if a.scheme else None
    geometry = DeviceGeometry.make(a.capacity_blocks, a.block_size, scheme)
    if Path(a.image).exists():
        raise CdfsError(f"{a.image} already exists")
    with Device.open_or_create(a.image, geometry) as dev:
        site = None
        if a.site:
            site = fmt.SiteInfo(platform.system().encode()[:15], platform.release().encode()[:15],
                                a.site.encode())
        v = init_volume(dev, a.owner, site)
        if site is not None:
            v.begin()
            v.commit()


def main(argv: list[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        a = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"cdfs: {exc}", file=err)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        if a.command == "init":
            cmd_init(a, out)
            return 0
        with Device.open_or_create(a.image) as dev:
            v = mount(dev)
            if a.command == "script":
                status = run_script(v, a.file, out)
            else:
                status = COMMANDS[a.command](v, a, out) or 0
            if v.trans_open:
                v.commit()
            return status
    except UsageError as exc:
        print(f"cdfs: {exc}", file=err)
        return 2
    except (CdfsError, OSError, ValueError) as exc:
        # Nothing is committed, so the image keeps only whole transactions.
        print(f"cdfs: {exc}", file=err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
