"""Shared fixtures-by-function and reference models for the test suite."""

from __future__ import annotations

import hashlib

from cdfs.device import Device, DeviceGeometry
from cdfs.fileio import fopen
from cdfs.format import ADDNAME_TYPE, DIRECTORY_TYPE, SOFT_LINK_TYPE
from cdfs.volume import StepClock, init_volume, mount


def new_device(tmp_path, capacity=4096, block_size=2048, name="img.cdsim", scheme=None):
    return Device.open_or_create(tmp_path / name, DeviceGeometry.make(capacity, block_size, scheme))


def new_volume(tmp_path, capacity=4096, block_size=2048, name="img.cdsim", **kw):
    dev = new_device(tmp_path, capacity, block_size, name)
    return init_volume(dev, kw.pop("owner", b"tester"), clock=StepClock(), **kw)


def remount(v):
    return mount(v.dev, StepClock(start=v.clock() + 1000) if isinstance(v.clock, StepClock) else None)


def put(v, dirnum, name, data: bytes, align=False):
    with fopen(v, dirnum, name, "w", align=align) as s:
        s.write(data)
    return s.result


def get(v, dirnum, name, version=0) -> bytes:
    with fopen(v, dirnum, name, "r", version) as s:
        return s.read()


def snapshot(dev) -> list[bytes | None]:
    out = []
    for o in range(dev.next_virgin):
        r = dev.read_block(o)
        out.append(r.data if r.written else None)
    return out


def tree_view(v, dirnum=1, prefix=""):
    """Sorted (path, type, file_number, content-sha) tuples for the live tree."""
    rows = []
    for e in v.directory(dirnum).entries:
        path = prefix + "/" + e.text_name
        if e.file_type == DIRECTORY_TYPE:
            rows.append((path, e.file_type, e.file_number, ""))
            rows += tree_view(v, e.file_number, path)
        elif e.file_type in (ADDNAME_TYPE,):
            rows.append((path, e.file_type, e.file_number, ""))
        elif e.file_type == SOFT_LINK_TYPE:
            h = v.read_header(e.header_location).soft_link
            rows.append((path, e.file_type, e.file_number,
                         f"{h.target_dir}:{h.target_name.hex()}:{h.target_version}"))
        else:
            with fopen(v, dirnum, e.name) as s:
                pieces = s.pieces
                data = b"".join(s.v.read_at(s.v.scheme.from_byte(p.pos), p.hi - p.lo) for p in pieces)
                marks = ",".join(f"{p.lo}-{p.hi}" for p in pieces)
            rows.append((path, e.file_type, e.file_number,
                         hashlib.sha256(data).hexdigest() + "@" + marks + f"/{s.end}"))
    return sorted(rows)


def tree_hash(v) -> str:
    return hashlib.sha256(repr(tree_view(v)).encode()).hexdigest()


class ShadowOracle:
    """Plain in-memory mirror of a fragmented file: bytes plus a mapped mask."""

    def __init__(self, data: bytes = b""):
        self.data = bytearray(data)
        self.mapped = bytearray(b"\x01" * len(data))

    @property
    def end(self) -> int:
        return len(self.data)

    def write(self, offset: int, chunk: bytes) -> None:
        stop = offset + len(chunk)
        if stop > len(self.data):
            grow = stop - len(self.data)
            self.data += bytes(grow)
            self.mapped += bytes(grow)
        self.data[offset:stop] = chunk
        self.mapped[offset:stop] = b"\x01" * len(chunk)

    def first_hole(self, offset: int, n: int) -> int | None:
        i = self.mapped.find(b"\x00", offset, offset + n)
        return None if i < 0 else i

    def read(self, offset: int, n: int) -> bytes:
        n = max(0, min(n, self.end - offset))
        return bytes(self.data[offset:offset + n])

    def mapped_count(self) -> int:
        return self.mapped.count(1)

    def refuses_patch(self, offset: int) -> bool:
        """A patch may not start strictly inside a hole."""
        return 0 < offset < self.end and not self.mapped[offset - 1] and not self.mapped[offset]


def random_bytes(rng, n: int) -> bytes:
    return rng.randbytes(n)


def file_sha(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def image_geometry(path):
    from cdfs.device import _unpack_header, SIM_HEADER_SIZE
    with open(path, "rb") as f:
        return _unpack_header(f.read(SIM_HEADER_SIZE))


def truncate_image(src, dst, keep: int) -> None:
    """Copy ``src`` to ``dst`` as if only blocks [0, keep) had ever been written."""
    import shutil
    from cdfs.device import SIM_HEADER_SIZE

    shutil.copyfile(src, dst)
    g = image_geometry(dst)
    with open(dst, "r+b") as f:
        f.seek(SIM_HEADER_SIZE + keep)
        f.write(bytes(g.capacity_blocks - keep))
        data_start = SIM_HEADER_SIZE + g.capacity_blocks
        f.seek(data_start + keep * g.block_size)
        f.write(bytes((g.capacity_blocks - keep) * g.block_size))


def poke_block(path, ordinal: int, data: bytes | None = None, state: int | None = None) -> None:
    """Edit one block of an image behind the device's back (corruption tests)."""
    from cdfs.device import SIM_HEADER_SIZE

    g = image_geometry(path)
    with open(path, "r+b") as f:
        if state is not None:
            f.seek(SIM_HEADER_SIZE + ordinal)
            f.write(bytes([state]))
        if data is not None:
            f.seek(SIM_HEADER_SIZE + g.capacity_blocks + ordinal * g.block_size)
            f.write(data.ljust(g.block_size, b"\x00"))


def last_valid_eot_scan(dev) -> int:
    """Oracle for locating the newest EOT: linear scan down from the written end."""
    from cdfs.errors import FormatError
    from cdfs.format import decode_eot

    scheme = dev.scheme
    for o in range(dev.next_virgin - 1, -1, -1):
        r = dev.read_block(o)
        if r.written:
            try:
                decode_eot(r.data, scheme.from_index(o))
                return o
            except FormatError:
                pass
    return -1


class RefTree:
    """Dict model of a directory tree for checking link resolution.

    ``dirs[d]`` maps name bytes to ("file", number), ("dir", number) or
    ("link", (target_dir, target_bytes)); ``parent[d]`` is the containing
    directory (the root's parent is None).
    """

    DOWN, UP, DEPTH = 0xFE, 0xFD, 64

    def __init__(self):
        self.dirs = {1: {}}
        self.parent = {1: None}
        self.next = 2

    def mkdir(self, d, name):
        n = self.next
        self.next += 1
        self.dirs[d][name] = ("dir", n)
        self.dirs[n] = {}
        self.parent[n] = d
        return n

    def file(self, d, name):
        n = self.next
        self.next += 1
        self.dirs[d][name] = ("file", n)
        return n

    def link(self, d, name, target_dir, target):
        n = self.next
        self.next += 1
        self.dirs[d][name] = ("link", (target_dir, target))
        return n

    def _entry(self, d, name, depth):
        """Returns (kind, number, containing_dir, depth) with links followed."""
        if name not in self.dirs[d]:
            raise LookupError(name)
        kind, payload = self.dirs[d][name]
        if kind != "link":
            return kind, payload, d, depth
        return self.follow(payload[0], payload[1], depth + 1)

    def follow(self, start, target, depth=1):
        if depth > self.DEPTH:
            raise RecursionError("link depth")
        cur, name = start, b""
        for c in target:
            if c == self.DOWN:
                if name:
                    kind, num, _, depth = self._entry(cur, name, depth)
                    if kind != "dir":
                        raise LookupError("not a directory")
                    cur, name = num, b""
            elif c == self.UP:
                if name:
                    _, _, cur, depth = self._entry(cur, name, depth)
                    name = b""
                else:
                    if self.parent[cur] is None:
                        raise LookupError("above root")
                    cur = self.parent[cur]
            else:
                name += bytes([c])
        if name:
            return self._entry(cur, name, depth)
        return "dir", cur, self.parent[cur], depth
