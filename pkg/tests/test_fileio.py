import hashlib
import io
import os
import random

import pytest
from hypothesis import given, settings, strategies as st

from cdfs import fileio, format as fmt, namespace as ns
from cdfs.errors import FileIOError, HoleError, MediaFull, NameExists, NoSuchVersion, NotFound, StreamBusy
from cdfs.fileio import MIN_STRIP, fopen
from cdfs.volume import fsck, mount

from support import ShadowOracle, get, new_volume, put, tree_hash


@pytest.fixture
def v(tmp_path):
    return new_volume(tmp_path, capacity=4096)


def entry(v, name, d=1):
    return v.directory(d).get(name.encode() if isinstance(name, str) else name)


# -- streams -------------------------------------------------------------------------------------


def test_write_read_round_trip(v):
    data = random.Random(1).randbytes(10_000)
    put(v, 1, "f", data)
    assert get(v, 1, "f") == data
    v.commit()
    assert get(mount(v.dev), 1, "f") == data


def test_three_writes_make_3000_bytes(v):
    with fopen(v, 1, "f", "w") as s:
        for _ in range(3):
            s.write(b"x" * 1000)
        s.write(b"")
    assert entry(v, "f").file_size == 3000
    assert len(get(v, 1, "f")) == 3000


def test_nothing_reaches_media_before_close(v):
    before = v.dev.next_virgin
    s = fopen(v, 1, "f", "w")
    s.write(b"abc" * 5000)
    assert v.dev.next_virgin == before
    s.close()
    assert v.dev.next_virgin > before


def test_header_precedes_content(v):
    put(v, 1, "f", b"A" * 100)
    e = entry(v, "f")
    h = v.read_header(e.header_location)
    assert v.scheme.to_byte(h.file_info.file_location) == v.scheme.to_byte(e.header_location) + h.padded_size
    assert h.file_info.file_version_number == 1


def test_second_write_stream_refused(v):
    s = fopen(v, 1, "a", "w")
    with pytest.raises(StreamBusy):
        fopen(v, 1, "b", "w")
    s.close()
    fopen(v, 1, "b", "w").close()


def test_open_errors(v):
    with pytest.raises(NotFound):
        fopen(v, 1, "missing")
    put(v, 1, "f", b"x")
    with pytest.raises(NoSuchVersion):
        fopen(v, 1, "f", version=2)
    with pytest.raises(ValueError):
        fopen(v, 1, "f", "a")
    ns.mkdir(v, 1, "d")
    with pytest.raises(NameExists):
        fopen(v, 1, "d", "w")


def test_seek(v):
    put(v, 1, "f", b"0123456789")
    with fopen(v, 1, "f") as s:
        assert s.seek(0) == 0
        s.seek(-1, io.SEEK_END)
        assert s.read(1) == b"9"
        s.seek(3)
        s.seek(2, io.SEEK_CUR)
        assert s.read(2) == b"56"
        assert s.read(100) == b"789"
        assert s.read(5) == b""
        with pytest.raises(FileIOError):
            s.seek(11)
        with pytest.raises(FileIOError):
            s.seek(-1)


def test_versions_and_creation_time(v):
    bodies = [b"first", b"second!", b"third..."]
    for b in bodies:
        put(v, 1, "f", b)
    for k, b in enumerate(bodies, 1):
        assert get(v, 1, "f", k) == b
    assert get(v, 1, "f", 0) == bodies[-1]
    chain = ns.history(v, 1, "f")
    created = {h.file_info.creation_time for _, h in chain}
    writes = [h.file_info.write_time for _, h in chain]
    assert len(created) == 1 and writes == sorted(writes, reverse=True)
    assert [h.backup.previous_version_location for _, h in chain][:-1] == [a for a, _ in chain][1:]


def test_snapshot_isolation(v):
    put(v, 1, "f", b"old contents")
    reader = fopen(v, 1, "f")
    put(v, 1, "f", b"new contents, longer")
    assert reader.read() == b"old contents"
    assert get(v, 1, "f") == b"new contents, longer"


def test_link_is_followed_on_open(v):
    put(v, 1, "f", b"target")
    ns.make_link(v, 1, "l", 1, b"f")
    assert get(v, 1, "l") == b"target"
    assert get(v, 1, "f") == b"target"


def test_media_full_on_close(tmp_path):
    v = new_volume(tmp_path, capacity=16)
    put(v, 1, "small", b"s")
    v.commit()
    committed = tree_hash(v)
    with pytest.raises(MediaFull):
        with fopen(v, 1, "big", "w") as s:
            s.write(b"b" * 2048 * 20)
    assert v.write_stream is None
    m = mount(v.dev)
    assert tree_hash(m) == committed and fsck(m).clean


def test_spool_dir_env(tmp_path, monkeypatch):
    spool = tmp_path / "spool"
    spool.mkdir()
    monkeypatch.setenv(fileio.SPOOL_ENV, str(spool))
    v = new_volume(tmp_path, capacity=64)
    s = fopen(v, 1, "f", "w")
    link = os.readlink(f"/proc/self/fd/{s.spool.fileno()}")
    assert link.startswith(str(spool) + "/")
    s.write(b"x")
    s.close()


# -- native import and export ----------------------------------------------------------------------


def test_import_export_round_trip(v, tmp_path):
    src = tmp_path / "in.bin"
    data = random.Random(3).randbytes(3 * 2048 + 77)
    src.write_bytes(data)
    fileio.import_file(v, src, 1, "in.bin")
    out = tmp_path / "out.bin"
    fileio.export_file(v, 1, "in.bin", 0, out)
    assert out.read_bytes() == data


@given(st.binary(max_size=9000))
@settings(max_examples=25)
def test_import_export_property(tmp_path_factory, data):
    d = tmp_path_factory.mktemp("rt")
    v = new_volume(d, capacity=256)
    (d / "in").write_bytes(data)
    fileio.import_file(v, d / "in", 1, "f")
    v.commit()
    fileio.export_file(mount(v.dev), 1, "f", 0, d / "out")
    assert (d / "out").read_bytes() == data
    v.dev.close()


def test_import_aligned(v, tmp_path):
    src = tmp_path / "track"
    src.write_bytes(b"audio" * 1000)
    fileio.import_file(v, src, 1, "track", start_on_next_block=True)
    h = v.read_header(entry(v, "track").header_location)
    assert v.scheme.offset_of(h.file_info.file_location) == 0
    assert get(v, 1, "track") == b"audio" * 1000


def test_import_preserve(v, tmp_path):
    src = tmp_path / "p"
    src.write_bytes(b"keep")
    os.utime(src, (1_000_000_000, 1_000_000_000))
    fileio.import_file(v, src, 1, "p", preserve=True)
    h = v.read_header(entry(v, "p").header_location)
    assert h.file_info.write_time == fmt.from_unix(1_000_000_000)
    assert h.access.file_access == os.stat(src).st_mode & 0o7777
    out = tmp_path / "q"
    fileio.export_file(v, 1, "p", 0, out, preserve=True)
    assert os.stat(out).st_mtime == 1_000_000_000


def test_export_versions_by_hash(v, tmp_path):
    ledger = {}
    for k in (1, 2):
        body = random.Random(k).randbytes(5000)
        put(v, 1, "f", body)
        ledger[k] = hashlib.sha256(body).hexdigest()
    for k in (1, 2):
        fileio.export_file(v, 1, "f", k, tmp_path / f"v{k}")
        assert hashlib.sha256((tmp_path / f"v{k}").read_bytes()).hexdigest() == ledger[k]
    fileio.export_file(v, 1, "f", 0, tmp_path / "v0")
    assert (tmp_path / "v0").read_bytes() == (tmp_path / "v2").read_bytes()
    with pytest.raises(NoSuchVersion):
        fileio.export_file(v, 1, "f", 3, tmp_path / "v3")


# -- fragmented files ---------------------------------------------------------------------------------


def test_convert_writes_only_header_and_map(tmp_path):
    v = new_volume(tmp_path, capacity=2048)
    data = random.Random(4).randbytes(1_000_000)
    put(v, 1, "big", data)
    loc = v.read_header(entry(v, "big").header_location).file_info.file_location
    before = v.dev.next_virgin
    fileio.convert_to_fragmented(v, 1, "big")
    assert v.dev.next_virgin - before < 2
    e = entry(v, "big")
    assert e.file_type == fmt.FRAGMENTED_TYPE and e.file_size == len(data)
    h = v.read_header(e.header_location)
    assert v.read_filemap(h.file_info.file_location).strips == [fmt.Fragment(loc, len(data), 0)]
    assert get(v, 1, "big") == data
    with pytest.raises(FileIOError):
        fileio.convert_to_fragmented(v, 1, "big")
    with pytest.raises(FileIOError):
        fileio.convert_to_contiguous(v, 1, "big")


def test_one_byte_patch_splits_and_grows_little(tmp_path):
    v = new_volume(tmp_path, capacity=2048)
    data = bytearray(random.Random(5).randbytes(1_000_000))
    put(v, 1, "big", bytes(data))
    fileio.convert_to_fragmented(v, 1, "big")
    before = v.dev.next_virgin
    fileio.patch(v, 1, "big", 500_000, b"\xAA")
    grown = v.dev.next_virgin - before
    assert grown * v.block_size <= 3 * v.block_size + MIN_STRIP
    data[500_000] = 0xAA
    assert get(v, 1, "big") == bytes(data)
    strips = v.read_filemap(v.read_header(entry(v, "big").header_location).file_info.file_location).strips
    assert len(strips) == 3
    assert [s.ordinal for s in strips] == sorted(s.ordinal for s in strips)
    assert strips[1].valid_chars == MIN_STRIP
    assert strips[0].end == strips[1].ordinal and strips[1].end == strips[2].ordinal


def test_patch_auto_converts_and_keeps_history(v):
    put(v, 1, "f", b"a" * 6000)
    fileio.patch(v, 1, "f", 10, b"ZZ")
    assert entry(v, "f").file_type == fmt.FRAGMENTED_TYPE
    assert get(v, 1, "f")[8:14] == b"aaZZaa"
    assert get(v, 1, "f", version=1) == b"a" * 6000
    v.commit()
    assert fsck(mount(v.dev)).clean


def test_patch_at_end_appends(v):
    put(v, 1, "f", b"abc")
    fileio.patch(v, 1, "f", 3, b"def")
    assert get(v, 1, "f") == b"abcdef"
    assert entry(v, "f").file_size == 6


def test_small_file_strip(v):
    put(v, 1, "f", b"abc")
    fileio.patch(v, 1, "f", 1, b"X")
    strips = v.read_filemap(v.read_header(entry(v, "f").header_location).file_info.file_location).strips
    assert strips == [fmt.Fragment(strips[0].loc, 3, 0)]
    assert get(v, 1, "f") == b"aXc"


def test_holes(v, tmp_path):
    put(v, 1, "f", b"x" * 100)
    fileio.patch(v, 1, "f", 10_000, b"y" * 10)
    assert entry(v, "f").file_size == 110
    with fopen(v, 1, "f") as s:
        assert s.end == 10_010 and s.holes == [(100, 10_000)]
        assert s.read(100) == b"x" * 100
        with pytest.raises(HoleError) as err:
            s.read(1)
        assert err.value.offset == 100
        s.seek(10_000)
        assert s.read() == b"y" * 10
    with pytest.raises(HoleError):
        fileio.export_file(v, 1, "f", 0, tmp_path / "out")
    with pytest.raises(FileIOError):
        fileio.patch(v, 1, "f", 5000, b"mid-hole")
    fileio.patch(v, 1, "f", 100, b"z" * 50)
    with fopen(v, 1, "f") as s:
        assert s.holes == [(150, 10_000)]


def test_one_byte_strips_are_readable(v):
    put(v, 1, "f", b"abcdef")
    old = v.read_header(entry(v, "f").header_location)
    loc = old.file_info.file_location
    strips = [fmt.Fragment(v.scheme.add_bytes(loc, i), 1, i) for i in range(6)]
    e = entry(v, "f")
    header = fileio._next_header(v, 1, e, old, 6)
    addr, header = v.write_fragmented(header, strips, [], b"")
    fileio._install(v, 1, e, addr, header, strips)
    assert get(v, 1, "f") == b"abcdef"


def apply_patch(v, oracle, offset, data):
    """Apply to both; the oracle decides whether the patch must be refused."""
    if oracle.refuses_patch(offset):
        with pytest.raises(FileIOError):
            fileio.patch(v, 1, "f", offset, data)
    else:
        fileio.patch(v, 1, "f", offset, data)
        oracle.write(offset, data)


def check_map(v, oracle):
    strips = v.read_filemap(v.read_header(entry(v, "f").header_location).file_info.file_location).strips
    assert [s.ordinal for s in strips] == sorted(s.ordinal for s in strips)
    assert fileio.valid_bytes(strips) == oracle.mapped_count() == entry(v, "f").file_size
    for s in strips:
        assert v.read_at(s.loc, s.valid_chars) == bytes(oracle.data[s.ordinal:s.end])


def oracle_read(oracle, offset, n):
    hole = oracle.first_hole(offset, min(n, oracle.end - offset))
    return hole, oracle.read(offset, n)


@given(st.lists(st.tuples(st.integers(0, 40_000), st.binary(min_size=1, max_size=6000)),
                min_size=1, max_size=12))
@settings(max_examples=30)
def test_patch_sequences_match_oracle(tmp_path_factory, patches):
    v = new_volume(tmp_path_factory.mktemp("frag"), capacity=1024)
    base = random.Random(len(patches)).randbytes(20_000)
    put(v, 1, "f", base)
    oracle = ShadowOracle(base)
    for offset, data in patches:
        apply_patch(v, oracle, offset, data)
        check_map(v, oracle)
    with fopen(v, 1, "f") as s:
        assert s.end == oracle.end
        pos = 0
        while pos < oracle.end:
            hole, want = oracle_read(oracle, pos, 3000)
            s.seek(pos)
            if hole is None:
                assert s.read(3000) == want
            else:
                with pytest.raises(HoleError) as err:
                    s.read(3000)
                assert err.value.offset == hole
            pos += 3000
    v.commit()
    assert fsck(mount(v.dev)).clean
    v.dev.close()
