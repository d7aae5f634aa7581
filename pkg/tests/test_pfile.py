import struct
import time
from collections import Counter

import numpy as np
import pytest

from conftest import random_table
from kpdnn.errors import CorruptArchiveError, DomainError, ParseError, ValidationError
from kpdnn.pfile import (HEADER_SIZE, DataSpec, FrameRecord, FrameTable, PFileSource,
                         from_text, parse_data_spec, partition_lengths, read_header,
                         read_partitions, read_pfile, record_size, splice, to_text,
                         write_pfile)
from kpdnn.rng import SeededRng


# -- data specs ---------------------------------------------------------------

def test_parse_data_spec_reference_example():
    assert parse_data_spec("train.pfile,partition=600m,random=true") == DataSpec(
        "train.pfile", 600 * 2**20, True, False)


def test_parse_data_spec_defaults_and_suffixes():
    assert parse_data_spec("x.pfile") == DataSpec("x.pfile", 256 * 2**20, False, False)
    s = parse_data_spec("x.pfile,partition=1k,stream=true")
    assert (s.partition_bytes, s.stream, s.random) == (1024, True, False)
    assert parse_data_spec("x,partition=2g").partition_bytes == 2 * 2**30
    assert parse_data_spec("x,partition=500").partition_bytes == 500


@pytest.mark.parametrize("bad, token", [
    ("x,shuffle=true", "shuffle"),
    ("x,partition=12q", "12q"),
    ("x,partition=", "''"),
    ("x,random=maybe", "maybe"),
    ("x,stream", "stream"),
])
def test_parse_data_spec_errors_name_token(bad, token):
    with pytest.raises(ParseError, match=token):
        parse_data_spec(bad)


# -- writing and reading ------------------------------------------------------

def test_table1_header_and_layout(tmp_path, table1):
    path = tmp_path / "t1.pfile"
    h = write_pfile(table1, path)
    assert (h.feature_dim, h.num_utterances, h.num_frames, h.label_present) == (6, 2, 3, True)
    blob = path.read_bytes()
    assert len(blob) == HEADER_SIZE + 3 * (4 + 4 + 6 * 4 + 4)
    assert blob[:4] == b"PFL1"
    assert struct.unpack_from("<IIQQB", blob, 4) == (1, 6, 2, 3, 1)
    # second record: utt 0, frame 1, six float32 features, label 179
    rec = struct.unpack_from("<II6fI", blob, HEADER_SIZE + 36)
    assert rec[:2] == (0, 1) and rec[-1] == 179
    assert rec[2] == np.float32(1.3)
    _, back = read_pfile(path)
    assert np.array_equal(back.labels, [10, 179, 32])
    assert np.array_equal(back.features, table1.features.astype(np.float32).astype(np.float64))


def test_records_api(tmp_path):
    recs = [FrameRecord(0, 0, (0.5, 1.0), 1), FrameRecord(0, 1, (0.25, 2.0), 0),
            FrameRecord(3, 0, (1.5, -1.0), 2)]
    write_pfile(recs, tmp_path / "r.pfile")
    _, back = read_pfile(tmp_path / "r.pfile")
    assert back.records() == recs


def test_empty_archive(tmp_path):
    h = write_pfile([], tmp_path / "e.pfile")
    assert (h.num_utterances, h.num_frames) == (0, 0)
    hdr, back = read_pfile(tmp_path / "e.pfile")
    assert len(back) == 0 and hdr == h


def test_roundtrip_random_tables(tmp_path):
    rng = SeededRng(11)
    for i in range(20):
        t = random_table(rng, int(rng.uniform(1)[0] * 6), 9, 1 + i % 5, labels=i % 4 != 0)
        write_pfile(t, tmp_path / "r.pfile")
        _, back = read_pfile(tmp_path / "r.pfile")
        assert back.equals(t)


def test_rejects_bad_records(tmp_path):
    with pytest.raises(ValidationError, match="dimension"):
        write_pfile([FrameRecord(0, 0, (1.0,), 0), FrameRecord(0, 1, (1.0, 2.0), 0)], tmp_path / "x")
    with pytest.raises(ValidationError, match="frame indices"):
        write_pfile([FrameRecord(0, 0, (1.0,), 0), FrameRecord(0, 2, (1.0,), 0)], tmp_path / "x")
    with pytest.raises(ValidationError, match="contiguous"):
        write_pfile([FrameRecord(0, 0, (1.0,), 0), FrameRecord(1, 0, (1.0,), 0),
                     FrameRecord(0, 0, (1.0,), 0)], tmp_path / "x")
    assert not (tmp_path / "x").exists()


def test_truncated_archive_reports_offset(tmp_path, table1):
    path = tmp_path / "t.pfile"
    write_pfile(table1, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(CorruptArchiveError) as err:
        read_pfile(path)
    assert err.value.offset == HEADER_SIZE + 2 * 36
    path.write_bytes(blob[:10])
    with pytest.raises(CorruptArchiveError, match="offset 10"):
        read_header(path)
    with pytest.raises(CorruptArchiveError):
        read_partitions(str(path))


def test_header_utterance_count_mismatch(tmp_path, table1):
    path = tmp_path / "t.pfile"
    write_pfile(table1, path)
    blob = bytearray(path.read_bytes())
    struct.pack_into("<Q", blob, 12, 5)
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptArchiveError, match="offset 12"):
        read_pfile(path)


# -- text dump -----------------------------------------------------------------

def test_text_dump_matches_table1_columns(table1):
    lines = to_text(table1).splitlines()
    assert lines[0] == "# pfile feature_dim=6 labels=1"
    assert lines[1] == "0\t0\t[0.2, 0.3, 0.5, 1.4, 1.8, 2.5]\t10"
    assert lines[3] == "1\t0\t[0.3, 0.5, 0.5, 1.4, 0.8, 1.4]\t32"


def test_text_roundtrip_bit_exact(tmp_path):
    rng = SeededRng(2)
    for labels in (True, False):
        t = random_table(rng, 4, 6, 3, labels=labels)
        write_pfile(t, tmp_path / "a.pfile")
        write_pfile(from_text(to_text(t)), tmp_path / "b.pfile")
        assert (tmp_path / "a.pfile").read_bytes() == (tmp_path / "b.pfile").read_bytes()


def test_from_text_errors():
    with pytest.raises(ParseError, match="line 1"):
        from_text("0\t0\t[1.0]\t1\n")
    with pytest.raises(ParseError, match="line 2"):
        from_text("# pfile feature_dim=2 labels=1\n0\t0\t[1.0]\t1\n")


# -- partitions ------------------------------------------------------------------

def test_partition_packing_example(tmp_path):
    # 100-byte records: 12 bytes of indices/label + 22 float32 features
    assert record_size(22) == 100
    rng = SeededRng(0)
    t = FrameTable(np.zeros(10), np.arange(10), rng.normal((10, 22)).astype(np.float32), np.arange(10))
    write_pfile(t, tmp_path / "p.pfile")
    for stream in ("false", "true"):
        parts = list(read_partitions(f"{tmp_path / 'p.pfile'},partition=300,stream={stream}"))
        assert [len(p) for p in parts] == [3, 3, 3, 1]
        assert [p.ordinal for p in parts] == [0, 1, 2, 3]
        assert np.array_equal(np.concatenate([p.frames.labels for p in parts]), np.arange(10))


def test_oversized_record_gets_own_partition():
    assert partition_lengths(5, 100, 40) == [1, 1, 1, 1, 1]
    assert partition_lengths(0, 100, 400) == []


def _multiset(frames):
    return Counter((int(u), int(f), frames_row.tobytes(), int(y))
                   for u, f, frames_row, y in zip(frames.utt, frames.frame, frames.features, frames.labels))


@pytest.mark.parametrize("random", ["true", "false"])
@pytest.mark.parametrize("stream", ["true", "false"])
def test_partitions_conserve_records(tmp_path, random, stream):
    rng = SeededRng(5)
    t = random_table(rng, 12, 15, 4)
    write_pfile(t, tmp_path / "d.pfile")
    spec = f"{tmp_path / 'd.pfile'},partition=200,random={random},stream={stream}"
    src = PFileSource(spec)
    for _ in range(2):
        parts = list(src.partitions(SeededRng(9)))
        merged = FrameTable(*[np.concatenate(c) for c in zip(
            *[(p.frames.utt, p.frames.frame, p.frames.features, p.frames.labels) for p in parts])])
        assert _multiset(merged) == _multiset(t)
        if random == "false":
            assert merged.equals(t)


def test_random_order_is_reproducible_and_within_partition(tmp_path):
    rng = SeededRng(6)
    t = random_table(rng, 10, 20, 2)
    write_pfile(t, tmp_path / "d.pfile")
    spec = f"{tmp_path / 'd.pfile'},partition=400,random=true"
    a = [p.frames.labels.copy() for p in read_partitions(spec, SeededRng(1))]
    b = [p.frames.labels.copy() for p in read_partitions(spec, SeededRng(1))]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    plain = [p.frames.labels for p in read_partitions(spec.replace("true", "false"))]
    for shuffled, orig in zip(a, plain):
        assert sorted(shuffled) == sorted(orig)
    assert any(not np.array_equal(x, y) for x, y in zip(a, plain))
    with pytest.raises(DomainError):
        list(read_partitions(spec))


def test_stream_mode_holds_at_most_two_partitions(tmp_path):
    rng = SeededRng(7)
    t = random_table(rng, 30, 40, 8)
    write_pfile(t, tmp_path / "big.pfile")
    part_bytes = 1000
    src = PFileSource(f"{tmp_path / 'big.pfile'},partition={part_bytes},stream=true")
    n = 0
    for p in src.partitions():
        n += len(p)
        time.sleep(0.002)
        # slow consumer: the prefetcher gets every chance to run ahead
        assert src.resident_bytes <= 2 * part_bytes
    assert n == len(t)
    assert src.peak_resident_bytes <= 2 * part_bytes
    assert src.peak_resident_bytes > part_bytes  # prefetch really overlapped
    assert src.resident_bytes == 0


def test_stream_generator_can_be_abandoned(tmp_path):
    rng = SeededRng(8)
    write_pfile(random_table(rng, 20, 20, 4), tmp_path / "d.pfile")
    src = PFileSource(f"{tmp_path / 'd.pfile'},partition=100,stream=true")
    gen = src.partitions()
    next(gen)
    gen.close()
    assert src.resident_bytes == 0


def test_resident_mode_loads_file_once(tmp_path):
    rng = SeededRng(8)
    write_pfile(random_table(rng, 20, 20, 4), tmp_path / "d.pfile")
    src = PFileSource(f"{tmp_path / 'd.pfile'},partition=100")
    list(src.partitions())
    table = src.table()
    list(src.partitions())
    assert src.table() is table


# -- splicing -----------------------------------------------------------------------

def test_splice_dimension_bnf_example():
    rng = SeededRng(0)
    t = random_table(rng, 3, 10, 42)
    assert splice(t, 4).feature_dim == 378


def test_splice_identity_and_single_frame():
    t = FrameTable([0, 0, 1], [0, 1, 0], [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], [0, 1, 2])
    assert splice(t, 0).equals(t)
    s = splice(t, 2)
    assert np.array_equal(s.features[2], [5.0, 6.0] * 5)
    assert np.array_equal(s.labels, t.labels)
    # utt 0, frame 0: left neighbours replicate frame 0, right ones clamp at frame 1
    assert np.array_equal(s.features[0], [1, 2, 1, 2, 1, 2, 3, 4, 3, 4])
    with pytest.raises(DomainError):
        splice(t, -1)


def test_splice_center_block_and_brute_force():
    rng = SeededRng(3)
    t = random_table(rng, 5, 7, 3)
    c = 2
    s = splice(t, c)
    assert np.array_equal(s.features[:, c * 3:(c + 1) * 3], t.features)
    for i in range(len(t)):
        u = t.utt[i]
        rows = np.flatnonzero(t.utt == u)
        want = []
        for o in range(-c, c + 1):
            j = min(max(i + o, rows[0]), rows[-1])
            want.extend(t.features[j])
        assert np.array_equal(s.features[i], want)
