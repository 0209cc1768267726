import itertools
import math
import struct

import pytest
from hypothesis import given, strategies as st

from cdfs.device import (
    NULL_ADDRESS, SIM_HEADER_SIZE, SIM_MAGIC, AddressScheme, BlockState, Device, DeviceGeometry,
)
from cdfs.errors import (
    AddressError, AlreadyWritten, CorruptImage, GeometryMismatch, MediaFull,
    NonSequentialWrite, NotWritten,
)

from support import new_device

AUDIO = AddressScheme.audio(2048)


def enumerate_addresses(moduli):
    """Oracle: every field tuple in media order, counted from zero."""
    return list(itertools.product(*[range(m) for m in moduli]))


# -- address arithmetic ---------------------------------------------------------


def test_linear_index_matches_enumeration_for_audio_scheme():
    order = enumerate_addresses((70, 60, 75))
    for fields in [(0, 0, 0), (0, 1, 0), (1, 0, 0), (0, 59, 74), (69, 59, 74)]:
        assert AUDIO.linear_index(AUDIO.encode(fields + (0,))) == order.index(fields)
    assert AUDIO.linear_index(AUDIO.encode((0, 1, 0, 0))) == 75
    assert AUDIO.linear_index(AUDIO.encode((1, 0, 0, 0))) == 4500


def test_small_scheme_full_enumeration_round_trip():
    scheme = AddressScheme(((3, 8), (4, 8), (5, 8), (16, 40)))
    for ordinal, fields in enumerate(enumerate_addresses((3, 4, 5))):
        raw = scheme.encode(fields + (0,))
        assert scheme.linear_index(raw) == ordinal
        assert scheme.from_index(ordinal) == raw
    assert scheme.block_capacity == 60


def test_advance_carries():
    assert AUDIO.format(AUDIO.advance(AUDIO.parse("000.000.074"), 1)) == "000.001.000"
    assert AUDIO.format(AUDIO.advance(AUDIO.parse("000.059.074"), 1)) == "001.000.000"
    x = AUDIO.encode((0, 3, 7, 99))
    assert AUDIO.advance(x, 0) == AUDIO.encode((0, 3, 7, 0))
    assert AUDIO.advance(AUDIO.parse("001.000.000"), -1) == AUDIO.parse("000.059.074")


def test_advance_out_of_range():
    with pytest.raises(AddressError):
        AUDIO.advance(AUDIO.from_index(0), -1)
    with pytest.raises(AddressError):
        AUDIO.advance(AUDIO.from_index(5), 20, capacity=16)


def test_entry_zero_is_most_significant():
    assert AUDIO.encode((1, 0, 0, 0)) == 1 << 48
    assert AUDIO.encode((0, 0, 0, 7)) == 7
    assert AUDIO.encode((0, 0, 1, 0)) < AUDIO.encode((0, 1, 0, 0)) < AUDIO.encode((1, 0, 0, 0))


def test_null_address_decodes_to_none():
    assert AUDIO.decode(NULL_ADDRESS) is None
    assert AUDIO.format(NULL_ADDRESS) == "null"
    assert AUDIO.parse("null") == NULL_ADDRESS
    with pytest.raises(AddressError):
        AUDIO.linear_index(NULL_ADDRESS)


def test_field_outside_modulo_rejected():
    with pytest.raises(AddressError):
        AUDIO.encode((70, 0, 0, 0))
    with pytest.raises(AddressError):
        AUDIO.decode(75 << 16)


@pytest.mark.parametrize("entries", [
    ((70, 16), (60, 16), (75, 16)),                 # 48 bits
    ((1, 32), (2048, 32)),                          # modulo < 2
    ((70000, 16), (2048, 48)),                       # modulo > 2**bits
    (((2, 1),) * 17),                               # too many fields
])
def test_invalid_schemes(entries):
    with pytest.raises(ValueError):
        AddressScheme(entries)


@st.composite
def schemes(draw):
    n = draw(st.integers(2, 6))
    cuts = sorted(draw(st.lists(st.integers(1, 63), min_size=n - 1, max_size=n - 1, unique=True)))
    widths = [b - a for a, b in zip([0] + cuts, cuts + [64])]
    entries = []
    for w in widths:
        hi = min(1 << w, 0xFFFF_FFFF)
        entries.append((draw(st.integers(2, hi)), w))
    return AddressScheme(tuple(entries))


@given(st.data())
def test_encode_decode_round_trip(data):
    scheme = data.draw(schemes())
    fields = tuple(data.draw(st.integers(0, m - 1)) for m, _ in scheme.entries)
    raw = scheme.encode(fields)
    assert raw != NULL_ADDRESS or scheme.decode(raw) is None
    if raw != NULL_ADDRESS:
        assert scheme.decode(raw) == fields


@given(st.data())
def test_from_index_inverts_linear_index(data):
    scheme = data.draw(schemes())
    ordinal = data.draw(st.integers(0, min(scheme.block_capacity - 1, 1 << 62)))
    offset = data.draw(st.integers(0, scheme.block_size - 1))
    raw = scheme.from_index(ordinal, offset)
    if raw == NULL_ADDRESS:
        return
    assert scheme.linear_index(raw) == ordinal
    assert scheme.offset_of(raw) == offset


@given(st.integers(0, 315000 * 2048 - 1), st.integers(0, 100_000))
def test_byte_arithmetic(pos, n):
    raw = AUDIO.from_byte(pos)
    assert AUDIO.to_byte(raw) == pos
    if pos + n < 315000 * 2048:
        assert AUDIO.to_byte(AUDIO.add_bytes(raw, n)) == pos + n


def test_format_and_parse():
    raw = AUDIO.from_index(6, 120)
    assert AUDIO.format(raw) == "000.000.006+120"
    assert AUDIO.parse("000.000.006+120") == raw
    assert AUDIO.parse("6+120") == raw
    assert AUDIO.parse("4500") == AUDIO.encode((1, 0, 0, 0))


def test_geometry_must_agree_with_scheme():
    with pytest.raises(ValueError):
        DeviceGeometry(1024, 16, AUDIO)
    with pytest.raises(ValueError):
        DeviceGeometry.make(1)
    with pytest.raises(ValueError):
        DeviceGeometry(2048, 400_000, AUDIO)


# -- simulator image --------------------------------------------------------------


def test_fresh_image_layout(tmp_path):
    dev = new_device(tmp_path, capacity=16)
    size = (tmp_path / "img.cdsim").stat().st_size
    assert size == SIM_HEADER_SIZE + 16 * 2049
    raw = (tmp_path / "img.cdsim").read_bytes()
    assert raw[:8] == SIM_MAGIC == b"CDSIM\x00\x00\x01"
    assert struct.unpack_from("<I", raw, 8)[0] == 2048
    assert struct.unpack_from("<Q", raw, 12)[0] == 16
    assert struct.unpack_from("<H", raw, 20)[0] == 4
    assert struct.unpack_from("<IHH", raw, 22) == (70, 16, 0)
    assert struct.unpack_from("<IHH", raw, 22 + 3 * 8) == (2048, 16, 0)
    assert struct.unpack_from("<IHH", raw, 22 + 4 * 8) == (0, 0, 0)
    assert raw[150:166] == bytes(16)
    assert dev.counts() == {"written": 0, "virgin": 16, "destroyed": 0}


def test_reopen_round_trips_geometry_and_state(tmp_path):
    dev = new_device(tmp_path, capacity=16)
    dev.write_next(0, b"hello")
    geometry = dev.geometry
    dev.close()
    again = Device.open_or_create(tmp_path / "img.cdsim")
    assert again.geometry == geometry
    assert again.next_virgin == 1
    assert again.read_block(0).data == b"hello".ljust(2048, b"\x00")
    again.close()
    with pytest.raises(GeometryMismatch):
        Device.open_or_create(tmp_path / "img.cdsim", DeviceGeometry.make(32))


def test_corrupt_images(tmp_path):
    path = tmp_path / "img.cdsim"
    new_device(tmp_path, capacity=16).close()
    raw = bytearray(path.read_bytes())
    raw[0] ^= 1
    path.write_bytes(raw)
    with pytest.raises(CorruptImage):
        Device.open_or_create(path)
    raw[0] ^= 1
    path.write_bytes(raw[:-1])
    with pytest.raises(CorruptImage):
        Device.open_or_create(path)
    with pytest.raises(FileNotFoundError):
        Device.open_or_create(tmp_path / "missing.cdsim")


def test_write_rules(tmp_path):
    dev = new_device(tmp_path, capacity=4)
    assert dev.read_block(0).virgin
    dev.write_next(0, b"a")
    with pytest.raises(AlreadyWritten):
        dev.write_next(0, b"b")
    with pytest.raises(NonSequentialWrite):
        dev.write_next(2, b"c")
    with pytest.raises(ValueError):
        dev.write_next(1, bytes(2049))
    for o in range(1, 4):
        dev.write_next(o, b"x")
    with pytest.raises(MediaFull):
        dev.write_next(4, b"y")
    with pytest.raises(AddressError):
        dev.read_block(4)


def test_fresh_device_rejects_out_of_order_first_write(tmp_path):
    dev = new_device(tmp_path, capacity=16)
    with pytest.raises(NonSequentialWrite):
        dev.write_next(2, b"x")


def test_destroy(tmp_path):
    dev = new_device(tmp_path, capacity=4)
    dev.write_next(0, b"secret")
    dev.destroy_block(0)
    r = dev.read_block(0)
    assert r.unreadable and not r.virgin and r.state is BlockState.DESTROYED
    raw = (tmp_path / "img.cdsim").read_bytes()
    assert raw[150] == 2
    assert raw[150 + 4:150 + 4 + 2048] == bytes(2048)
    with pytest.raises(NotWritten):
        dev.destroy_block(1)
    # the written prefix is unchanged
    assert dev.next_virgin == 1


def test_probe_counter(tmp_path):
    dev = new_device(tmp_path, capacity=4)
    dev.read_block(0)
    dev.read_block(1)
    dev.state(2)
    assert dev.probes == 2


@pytest.mark.parametrize("written,expected", [(0, 0), (7, 7), (16, None)])
def test_find_first_virgin_examples(tmp_path, written, expected):
    dev = new_device(tmp_path, capacity=16)
    for o in range(written):
        dev.write_next(o, b"")
    assert dev.find_first_virgin(0, 16) == expected


@given(st.integers(1, 64), st.data())
def test_find_first_virgin_matches_scan(tmp_path_factory, capacity, data):
    written = data.draw(st.integers(0, capacity))
    lo = data.draw(st.integers(0, capacity))
    hi = data.draw(st.integers(lo, capacity))
    dev = new_device(tmp_path_factory.mktemp("ffv"), capacity=max(capacity, 2))
    for o in range(written):
        dev.write_next(o, b"")
    scan = next((o for o in range(lo, hi) if dev.state(o) is BlockState.VIRGIN), None)
    dev.probes = 0
    assert dev.find_first_virgin(lo, hi) == scan
    assert dev.probes <= math.ceil(math.log2(hi - lo + 1)) + 2 if hi > lo else dev.probes == 0
    dev.close()


def test_find_first_virgin_large_device_probe_bound(tmp_path):
    dev = new_device(tmp_path, capacity=262144)
    for o in range(5):
        dev.write_next(o, b"")
    dev.probes = 0
    assert dev.find_first_virgin(0, 262144) == 5
    assert dev.probes <= 20


@given(st.lists(st.tuples(st.sampled_from(["write", "destroy", "read"]), st.integers(0, 15),
                          st.binary(max_size=64)), max_size=40))
def test_written_content_is_immutable(tmp_path_factory, ops):
    dev = new_device(tmp_path_factory.mktemp("imm"), capacity=16)
    model: dict[int, bytes | None] = {}
    for op, o, payload in ops:
        if op == "write":
            if dev.next_virgin < 16:
                n = dev.next_virgin
                dev.write_next(n, payload)
                model[n] = payload.ljust(2048, b"\x00")
        elif op == "destroy" and o in model:
            dev.destroy_block(o)
            model[o] = None
        for k, content in model.items():
            r = dev.read_block(k)
            assert (r.data if r.written else None) == content
        states = [dev.state(k) for k in range(16)]
        boundary = states.index(BlockState.VIRGIN) if BlockState.VIRGIN in states else 16
        assert all(s is not BlockState.VIRGIN for s in states[:boundary])
        assert all(s is BlockState.VIRGIN for s in states[boundary:])
    dev.close()
