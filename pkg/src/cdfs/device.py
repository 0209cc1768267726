"""Write-once block device contract and the file-backed DRAW simulator.

Media addresses are 64-bit values split into mixed-radix fields by an
:class:`AddressScheme`.  Field 0 sits in the most significant bits and the
last field holds the byte offset within a block, so unsigned comparison of
raw values follows media order.

The simulator stores everything in one image file::

    0   magic "CDSIM\\0\\0\\1"
    8   block_size        u32
    12  capacity_blocks   u64
    20  used_count        u16
    22  16 x (modulo u32, bits u16, pad u16)
    150 state table, one byte per block (0 virgin, 1 written, 2 destroyed)
    ..  block data, capacity_blocks * block_size bytes

Device I/O is addressed by block ordinal; convert a media address with
:meth:`AddressScheme.linear_index`.
"""

from __future__ import annotations

import enum
import math
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    AddressError,
    AlreadyWritten,
    CorruptImage,
    GeometryMismatch,
    MediaFull,
    NonSequentialWrite,
    NotWritten,
)

NULL_ADDRESS = 0xFFFF_FFFF_FFFF_FFFF
MAX_POINTERDEFS = 16

SIM_MAGIC = b"CDSIM\x00\x00\x01"
_SIM_HEAD = struct.Struct("<8sIQH")
_POINTERDEF = struct.Struct("<IHH")
SIM_HEADER_SIZE = _SIM_HEAD.size + MAX_POINTERDEFS * _POINTERDEF.size  # 150


@dataclass(frozen=True)
class AddressScheme:
    """Mixed-radix partition of a 64-bit media address.

    ``entries`` holds ``(modulo_of_value, bits_in_value)`` pairs; the last
    one is the in-block byte offset and its modulo is the block size.
    """

    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        entries = tuple((int(m), int(b)) for m, b in self.entries)
        object.__setattr__(self, "entries", entries)
        if not 2 <= len(entries) <= MAX_POINTERDEFS:
            raise ValueError("a scheme needs between 2 and 16 fields")
        if sum(b for _, b in entries) != 64:
            raise ValueError("field widths must add up to 64 bits")
        for modulo, bits in entries:
            if bits < 1 or modulo < 2 or modulo > (1 << bits) or modulo > 0xFFFF_FFFF:
                raise ValueError(f"bad field descriptor ({modulo}, {bits})")
        shifts = []
        acc = 0
        for _, bits in reversed(entries):
            shifts.append(acc)
            acc += bits
        object.__setattr__(self, "_shifts", tuple(reversed(shifts)))

    @classmethod
    def audio(cls, block_size: int = 2048) -> "AddressScheme":
        """Minute/second/block addressing of audio-format discs."""
        return cls(((70, 16), (60, 16), (75, 16), (block_size, 16)))

    @classmethod
    def default_for(cls, capacity_blocks: int, block_size: int) -> "AddressScheme":
        if capacity_blocks <= 70 * 60 * 75:
            return cls.audio(block_size)
        return cls(((65536, 16), (65536, 16), (65536, 16), (block_size, 16)))

    @property
    def block_size(self) -> int:
        return self.entries[-1][0]

    @property
    def used_count(self) -> int:
        return len(self.entries)

    @property
    def block_moduli(self) -> tuple[int, ...]:
        return tuple(m for m, _ in self.entries[:-1])

    @property
    def block_capacity(self) -> int:
        return math.prod(self.block_moduli)

    def encode(self, fields) -> int:
        fields = tuple(fields)
        if len(fields) != len(self.entries):
            raise AddressError(f"expected {len(self.entries)} fields, got {len(fields)}")
        raw = 0
        for value, (modulo, _), shift in zip(fields, self.entries, self._shifts):
            if not 0 <= value < modulo:
                raise AddressError(f"field value {value} outside modulo {modulo}")
            raw |= value << shift
        return raw

    def decode(self, raw: int) -> tuple[int, ...] | None:
        """Split ``raw`` into fields; ``None`` for the null address."""
        if raw == NULL_ADDRESS:
            return None
        if not 0 <= raw < (1 << 64):
            raise AddressError("address must be a 64-bit unsigned value")
        fields = []
        for (modulo, bits), shift in zip(self.entries, self._shifts):
            value = (raw >> shift) & ((1 << bits) - 1)
            if value >= modulo:
                raise AddressError(f"field value {value} outside modulo {modulo}")
            fields.append(value)
        return tuple(fields)

    def linear_index(self, raw: int) -> int:
        """Block ordinal of ``raw``; the offset field is ignored."""
        fields = self.decode(raw)
        if fields is None:
            raise AddressError("null address has no ordinal")
        ordinal = 0
        for value, modulo in zip(fields[:-1], self.block_moduli):
            ordinal = ordinal * modulo + value
        return ordinal

    def offset_of(self, raw: int) -> int:
        fields = self.decode(raw)
        if fields is None:
            raise AddressError("null address has no offset")
        return fields[-1]

    def from_index(self, ordinal: int, offset: int = 0) -> int:
        if not 0 <= ordinal < self.block_capacity:
            raise AddressError(f"ordinal {ordinal} outside the address space")
        fields = [offset]
        for modulo in reversed(self.block_moduli):
            ordinal, value = divmod(ordinal, modulo)
            fields.append(value)
        return self.encode(reversed(fields))

    def advance(self, raw: int, nblocks: int, capacity: int | None = None) -> int:
        """Address ``nblocks`` blocks away from ``raw``, with offset 0."""
        target = self.linear_index(raw) + nblocks
        limit = self.block_capacity if capacity is None else capacity
        if not 0 <= target < limit:
            raise AddressError(f"ordinal {target} outside the media")
        return self.from_index(target)

    # Byte-granular helpers used when records and strips straddle blocks.

    def to_byte(self, raw: int) -> int:
        return self.linear_index(raw) * self.block_size + self.offset_of(raw)

    def from_byte(self, position: int) -> int:
        ordinal, offset = divmod(position, self.block_size)
        return self.from_index(ordinal, offset)

    def add_bytes(self, raw: int, nbytes: int) -> int:
        return self.from_byte(self.to_byte(raw) + nbytes)

    def format(self, raw: int) -> str:
        """Dotted text form, e.g. ``000.001.074`` or ``000.000.006+120``."""
        fields = self.decode(raw)
        if fields is None:
            return "null"
        text = ".".join(f"{v:03d}" for v in fields[:-1])
        return text if fields[-1] == 0 else f"{text}+{fields[-1]}"

    def parse(self, text: str) -> int:
        text = text.strip()
        if text == "null":
            return NULL_ADDRESS
        offset = 0
        if "+" in text:
            text, off = text.split("+", 1)
            offset = int(off)
        parts = [int(p) for p in text.split(".")]
        if len(parts) == 1:
            return self.from_index(parts[0], offset)
        return self.encode(parts + [offset])


@dataclass(frozen=True)
class DeviceGeometry:
    block_size: int
    capacity_blocks: int
    scheme: AddressScheme

    def __post_init__(self):
        if self.block_size != self.scheme.block_size:
            raise ValueError("block size must equal the offset field modulo")
        if self.capacity_blocks < 2:
            raise ValueError("a device needs at least two blocks")
        if self.capacity_blocks > self.scheme.block_capacity:
            raise ValueError("capacity exceeds what the address scheme can name")

    @classmethod
    def make(cls, capacity_blocks: int, block_size: int = 2048,
             scheme: AddressScheme | None = None) -> "DeviceGeometry":
        if scheme is None:
            scheme = AddressScheme.default_for(capacity_blocks, block_size)
        return cls(block_size, capacity_blocks, scheme)


class BlockState(enum.IntEnum):
    VIRGIN = 0
    WRITTEN = 1
    DESTROYED = 2


@dataclass(frozen=True)
class BlockRead:
    """Outcome of a block read: written content, virgin, or unreadable."""

    state: BlockState
    data: bytes | None = None

    @property
    def written(self) -> bool:
        return self.state is BlockState.WRITTEN

    @property
    def virgin(self) -> bool:
        return self.state is BlockState.VIRGIN

    @property
    def unreadable(self) -> bool:
        return self.state is BlockState.DESTROYED


def _pack_header(geometry: DeviceGeometry) -> bytes:
    scheme = geometry.scheme
    out = bytearray(_SIM_HEAD.pack(SIM_MAGIC, geometry.block_size,
                                   geometry.capacity_blocks, scheme.used_count))
    for i in range(MAX_POINTERDEFS):
        modulo, bits = scheme.entries[i] if i < scheme.used_count else (0, 0)
        out += _POINTERDEF.pack(modulo, bits, 0)
    return bytes(out)


def _unpack_header(raw: bytes) -> DeviceGeometry:
    if len(raw) < SIM_HEADER_SIZE:
        raise CorruptImage("image shorter than its header")
    magic, block_size, capacity, used = _SIM_HEAD.unpack_from(raw)
    if magic != SIM_MAGIC:
        raise CorruptImage("bad simulator image magic")
    if not 2 <= used <= MAX_POINTERDEFS:
        raise CorruptImage(f"bad pointerdef count {used}")
    entries = []
    for i in range(used):
        modulo, bits, _ = _POINTERDEF.unpack_from(raw, _SIM_HEAD.size + i * _POINTERDEF.size)
        entries.append((modulo, bits))
    try:
        return DeviceGeometry(block_size, capacity, AddressScheme(tuple(entries)))
    except ValueError as exc:
        raise CorruptImage(f"inconsistent geometry: {exc}") from exc


class Device:
    """File-backed write-once device.

    Blocks must be written in ordinal order, each exactly once.  ``probes``
    counts read probes for the lifetime of the handle; tests reset it freely.
    """

    def __init__(self, path: Path, geometry: DeviceGeometry, fh):
        self.path = Path(path)
        self.geometry = geometry
        self._fh = fh
        self._lock = threading.Lock()
        self.probes = 0
        self._data_start = SIM_HEADER_SIZE + geometry.capacity_blocks
        fh.seek(SIM_HEADER_SIZE)
        states = fh.read(geometry.capacity_blocks)
        first = states.find(b"\x00")
        self._next = geometry.capacity_blocks if first < 0 else first

    @classmethod
    def open_or_create(cls, path, geometry: DeviceGeometry | None = None) -> "Device":
        path = Path(path)
        if path.exists():
            fh = open(path, "r+b")
            try:
                found = _unpack_header(fh.read(SIM_HEADER_SIZE))
                expected = SIM_HEADER_SIZE + found.capacity_blocks * (1 + found.block_size)
                if os.fstat(fh.fileno()).st_size != expected:
                    raise CorruptImage("image length disagrees with its geometry")
                if geometry is not None and geometry != found:
                    raise GeometryMismatch("existing image has a different geometry")
            except Exception:
                fh.close()
                raise
            return cls(path, found, fh)
        if geometry is None:
            raise FileNotFoundError(f"{path}: no image and no geometry to create one")
        fh = open(path, "w+b")
        fh.write(_pack_header(geometry))
        fh.truncate(SIM_HEADER_SIZE + geometry.capacity_blocks * (1 + geometry.block_size))
        fh.flush()
        return cls(path, geometry, fh)

    @property
    def block_size(self) -> int:
        return self.geometry.block_size

    @property
    def capacity(self) -> int:
        return self.geometry.capacity_blocks

    @property
    def scheme(self) -> AddressScheme:
        return self.geometry.scheme

    @property
    def next_virgin(self) -> int:
        """Ordinal the next write must target (simulator bookkeeping, no probe)."""
        return self._next

    def _check(self, ordinal: int) -> None:
        if not 0 <= ordinal < self.capacity:
            raise AddressError(f"block {ordinal} outside the media (capacity {self.capacity})")

    def _state(self, ordinal: int) -> BlockState:
        self._fh.seek(SIM_HEADER_SIZE + ordinal)
        return BlockState(self._fh.read(1)[0])

    def state(self, ordinal: int) -> BlockState:
        """Block state without counting a probe (for accounting and tests)."""
        self._check(ordinal)
        with self._lock:
            return self._state(ordinal)

    def read_block(self, ordinal: int) -> BlockRead:
        self._check(ordinal)
        with self._lock:
            self.probes += 1
            state = self._state(ordinal)
            if state is not BlockState.WRITTEN:
                return BlockRead(state)
            self._fh.seek(self._data_start + ordinal * self.block_size)
            return BlockRead(state, self._fh.read(self.block_size))

    def write_next(self, ordinal: int, content: bytes) -> None:
        if len(content) > self.block_size:
            raise ValueError("content larger than a block")
        with self._lock:
            if ordinal >= self.capacity and ordinal == self._next:
                raise MediaFull("no virgin blocks left")
            self._check(ordinal)
            if ordinal < self._next:
                raise AlreadyWritten(f"block {ordinal} is already written")
            if ordinal != self._next:
                raise NonSequentialWrite(
                    f"block {ordinal} written out of sequence (next is {self._next})")
            self._fh.seek(self._data_start + ordinal * self.block_size)
            self._fh.write(bytes(content).ljust(self.block_size, b"\x00"))
            self._fh.seek(SIM_HEADER_SIZE + ordinal)
            self._fh.write(bytes([BlockState.WRITTEN]))
            self._fh.flush()
            self._next += 1

    def destroy_block(self, ordinal: int) -> None:
        self._check(ordinal)
        with self._lock:
            if self._state(ordinal) is BlockState.VIRGIN:
                raise NotWritten(f"block {ordinal} is virgin; nothing to destroy")
            self._fh.seek(self._data_start + ordinal * self.block_size)
            self._fh.write(bytes(self.block_size))
            self._fh.seek(SIM_HEADER_SIZE + ordinal)
            self._fh.write(bytes([BlockState.DESTROYED]))
            self._fh.flush()

    def find_first_virgin(self, lo: int, hi: int) -> int | None:
        """Smallest virgin ordinal in ``[lo, hi)`` by binary search, or None.

        Assumes written blocks precede virgin ones within the range.  Costs
        ceil(log2(hi - lo + 1)) read probes.
        """
        if not 0 <= lo <= hi <= self.capacity:
            raise AddressError(f"bad search range [{lo}, {hi})")
        left, right = lo, hi  # answer lies in [left, right]; right means none
        while left < right:
            mid = (left + right) // 2
            if self.read_block(mid).virgin:
                right = mid
            else:
                left = mid + 1
        return None if left == hi else left

    def counts(self) -> dict[str, int]:
        with self._lock:
            self._fh.seek(SIM_HEADER_SIZE)
            states = self._fh.read(self.capacity)
        return {
            "written": states.count(1),
            "virgin": states.count(0),
            "destroyed": states.count(2),
        }

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
