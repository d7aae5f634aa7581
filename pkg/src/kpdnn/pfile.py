"""PFile feature archives.

On-disk layout (little-endian, version 1)::

    offset  size  field
    0       4     magic b"PFL1"
    4       4     version (u32, = 1)
    8       4     feature_dim (u32)
    12      8     num_utterances (u64)
    20      8     num_frames (u64)
    28      1     label_present (u8, 0 or 1)
    29      ...   num_frames records, in file order

    record: utt_index u32 | frame_index u32 | feature_dim x f32 | label u32
            (the label field is absent when label_present == 0)

Features are stored as 32-bit floats and widened to float64 on read, so
``read(write(t))`` is bit-exact for any table whose features are already
float32-representable.

The text dump has one ``# pfile feature_dim=<d> labels=<0|1>`` line
followed by one tab-separated line per record in the column order
utterance, frame, ``[f0, f1, ...]``, label.
"""
import dataclasses
import os
import queue
import re
import struct
import tempfile
import threading
from typing import Iterator, List, Optional, Sequence

import numpy as np

from .errors import CorruptArchiveError, DomainError, ParseError, ValidationError
from .rng import SeededRng

MAGIC = b"PFL1"
VERSION = 1
HEADER = struct.Struct("<4sIIQQB")
HEADER_SIZE = HEADER.size  # 29
DEFAULT_PARTITION_BYTES = 256 * 2**20
_SIZE_SUFFIX = {"": 1, "k": 2**10, "m": 2**20, "g": 2**30}


@dataclasses.dataclass(frozen=True)
class FrameRecord:
    utt_index: int
    frame_index: int
    features: tuple
    label: Optional[int] = None


@dataclasses.dataclass(frozen=True)
class PFileHeader:
    feature_dim: int
    num_utterances: int
    num_frames: int
    label_present: bool = True
    magic: bytes = MAGIC
    version: int = VERSION

    @property
    def record_size(self):
        return record_size(self.feature_dim, self.label_present)

    def pack(self):
        return HEADER.pack(self.magic, self.version, self.feature_dim,
                           self.num_utterances, self.num_frames, int(self.label_present))


def record_size(feature_dim, label_present=True):
    return 8 + 4 * feature_dim + (4 if label_present else 0)


class FrameTable:
    """Columnar batch of frame records.

    ``utt`` and ``frame`` are int64 vectors, ``features`` an ``n x d`` float64
    matrix and ``labels`` an int64 vector or ``None``.
    """

    def __init__(self, utt, frame, features, labels=None):
        self.utt = np.asarray(utt, dtype=np.int64).reshape(-1)
        self.frame = np.asarray(frame, dtype=np.int64).reshape(-1)
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(len(self.utt), -1)
        self.features = feats
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64).reshape(-1)
        n = len(self.utt)
        if len(self.frame) != n or self.features.shape[0] != n or (
            self.labels is not None and len(self.labels) != n
        ):
            raise ValidationError("frame table columns have different lengths")

    @classmethod
    def empty(cls, feature_dim, labels=True):
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, feature_dim)),
                   np.zeros(0) if labels else None)

    @classmethod
    def from_records(cls, records: Sequence[FrameRecord], feature_dim=None):
        records = list(records)
        if not records:
            return cls.empty(feature_dim or 0)
        dims = {len(r.features) for r in records}
        if len(dims) != 1:
            raise ValidationError(f"inconsistent feature dimensions {sorted(dims)}")
        has_label = [r.label is not None for r in records]
        if any(has_label) and not all(has_label):
            raise ValidationError("either every record carries a label or none does")
        return cls(
            [r.utt_index for r in records],
            [r.frame_index for r in records],
            np.array([r.features for r in records], dtype=np.float64).reshape(len(records), -1),
            [r.label for r in records] if all(has_label) else None,
        )

    def __len__(self):
        return len(self.utt)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def records(self) -> List[FrameRecord]:
        labels = self.labels if self.labels is not None else [None] * len(self)
        return [
            FrameRecord(int(u), int(f), tuple(float(v) for v in x), None if y is None else int(y))
            for u, f, x, y in zip(self.utt, self.frame, self.features, labels)
        ]

    def take(self, idx):
        return FrameTable(self.utt[idx], self.frame[idx], self.features[idx],
                          None if self.labels is None else self.labels[idx])

    def with_features(self, features):
        return FrameTable(self.utt, self.frame, features, self.labels)

    def equals(self, other):
        """Bit-exact comparison of every column."""
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.features.shape == other.features.shape
            and np.array_equal(self.utt, other.utt)
            and np.array_equal(self.frame, other.frame)
            and self.features.tobytes() == other.features.tobytes()
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )


def _record_dtype(feature_dim, label_present):
    fields = [("utt", "<u4"), ("frame", "<u4"), ("feat", "<f4", (feature_dim,))]
    if label_present:
        fields.append(("label", "<u4"))
    return np.dtype(fields)


def utterance_bounds(utt):
    """Start/end row of every contiguous utterance block."""
    utt = np.asarray(utt)
    if len(utt) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(utt[1:] != utt[:-1]) + 1
    starts = np.concatenate([[0], change]).astype(np.int64)
    ends = np.concatenate([change, [len(utt)]]).astype(np.int64)
    return starts, ends


def _check_structure(table: FrameTable):
    """Return the number of utterances or raise ValidationError."""
    starts, ends = utterance_bounds(table.utt)
    if len(set(table.utt[starts].tolist())) != len(starts):
        raise ValidationError("records of one utterance are not contiguous")
    for s, e in zip(starts, ends):
        expected = np.arange(e - s)
        if not np.array_equal(table.frame[s:e], expected):
            bad = s + int(np.flatnonzero(table.frame[s:e] != expected)[0])
            raise ValidationError(
                f"utterance {table.utt[s]}: frame indices must run 0,1,2,... "
                f"(record {bad} has frame {table.frame[bad]})"
            )
    return len(starts)


def _as_table(records, feature_dim=None):
    if isinstance(records, FrameTable):
        return records
    return FrameTable.from_records(records, feature_dim)


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, chunks):
    """Write ``chunks`` to a temp file beside ``path`` and rename it into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_pfile(records, feature_dim=None):
    table = _as_table(records, feature_dim)
    dim = table.feature_dim
    if len(table) and not np.all(np.isfinite(table.features)):
        raise ValidationError("features must be finite")
    for name, col in (("utt_index", table.utt), ("frame_index", table.frame), ("label", table.labels)):
        if col is not None and len(col) and (col.min() < 0 or col.max() >= 2**32):
            raise ValidationError(f"{name} does not fit in u32")
    num_utts = _check_structure(table)
    label_present = table.labels is not None
    header = PFileHeader(dim, num_utts, len(table), label_present)
    rec = np.zeros(len(table), dtype=_record_dtype(dim, label_present))
    rec["utt"] = table.utt
    rec["frame"] = table.frame
    rec["feat"] = table.features.astype(np.float32)
    if label_present:
        rec["label"] = table.labels
    return header, header.pack() + rec.tobytes()


def write_pfile(records, path, feature_dim=None) -> PFileHeader:
    """Validate ``records`` and write them atomically; returns the header."""
    header, blob = encode_pfile(records, feature_dim)
    atomic_write_bytes(path, [blob])
    return header


def parse_header(blob, file_size):
    if len(blob) < HEADER_SIZE:
        raise CorruptArchiveError("file shorter than the PFile header", len(blob))
    magic, version, dim, nutt, nframes, flag = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CorruptArchiveError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CorruptArchiveError(f"unsupported version {version}", 4)
    if flag not in (0, 1):
        raise CorruptArchiveError(f"bad label flag {flag}", 28)
    header = PFileHeader(dim, nutt, nframes, bool(flag))
    expected = HEADER_SIZE + nframes * header.record_size
    if file_size < expected:
        complete = (file_size - HEADER_SIZE) // header.record_size
        raise CorruptArchiveError(
            f"truncated archive: header promises {nframes} frames, payload holds {complete}",
            HEADER_SIZE + complete * header.record_size,
        )
    if file_size > expected:
        raise CorruptArchiveError("trailing bytes after the last record", expected)
    return header


def read_header(path) -> PFileHeader:
    with open(path, "rb") as fh:
        blob = fh.read(HEADER_SIZE)
        size = os.fstat(fh.fileno()).st_size
    return parse_header(blob, size)


def _decode_records(buf, header, first_index=0):
    rec = np.frombuffer(buf, dtype=_record_dtype(header.feature_dim, header.label_present))
    return FrameTable(
        rec["utt"].astype(np.int64),
        rec["frame"].astype(np.int64),
        rec["feat"].astype(np.float64).reshape(len(rec), header.feature_dim),
        rec["label"].astype(np.int64) if header.label_present else None,
    )


def decode_pfile(blob):
    header = parse_header(blob, len(blob))
    table = _decode_records(blob[HEADER_SIZE:], header)
    _verify_payload(table, header)
    return header, table


def _verify_payload(table, header):
    try:
        nutt = _check_structure(table)
    except ValidationError as exc:
        raise CorruptArchiveError(f"payload violates record ordering: {exc}", HEADER_SIZE) from None
    if nutt != header.num_utterances:
        raise CorruptArchiveError(
            f"header says {header.num_utterances} utterances, payload has {nutt}", 12
        )


def read_pfile(path):
    """Return ``(header, FrameTable)`` for the whole archive."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_pfile(blob)


# ---------------------------------------------------------------------------
# text dump
# ---------------------------------------------------------------------------

def _fmt32(v):
    return str(np.float32(v))


def to_text(table: FrameTable) -> str:
    lines = [f"# pfile feature_dim={table.feature_dim} labels={int(table.labels is not None)}"]
    labels = table.labels if table.labels is not None else [None] * len(table)
    for u, f, x, y in zip(table.utt, table.frame, table.features, labels):
        cols = [str(u), str(f), "[" + ", ".join(_fmt32(v) for v in x) + "]"]
        if y is not None:
            cols.append(str(y))
        lines.append("\t".join(cols))
    return "\n".join(lines) + "\n"


_TEXT_HEADER = re.compile(r"#\s*pfile\s+feature_dim=(\d+)\s+labels=([01])\s*$")


def from_text(text: str) -> FrameTable:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty text dump (missing '# pfile' header line)")
    m = _TEXT_HEADER.match(lines[0].strip())
    if not m:
        raise ParseError(f"line 1: expected '# pfile feature_dim=<d> labels=<0|1>', got {lines[0]!r}")
    dim, has_labels = int(m.group(1)), m.group(2) == "1"
    utt, frame, feats, labels = [], [], [], []
    ncols = 4 if has_labels else 3
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) != ncols:
            raise ParseError(f"line {lineno}: expected {ncols} tab-separated columns, got {len(cols)}")
        vec = cols[2].strip()
        if not (vec.startswith("[") and vec.endswith("]")):
            raise ParseError(f"line {lineno}: feature vector must be bracketed")
        body = vec[1:-1].strip()
        try:
            values = [np.float32(tok) for tok in body.split(",")] if body else []
            utt.append(int(cols[0]))
            frame.append(int(cols[1]))
            if has_labels:
                labels.append(int(cols[3]))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        if len(values) != dim:
            raise ParseError(f"line {lineno}: expected {dim} features, got {len(values)}")
        feats.append(values)
    features = np.array(feats, dtype=np.float32).reshape(len(feats), dim).astype(np.float64)
    return FrameTable(utt, frame, features, labels if has_labels else None)


# ---------------------------------------------------------------------------
# data specs and partitioned reading
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class DataSpec:
    path: str
    partition_bytes: int = DEFAULT_PARTITION_BYTES
    random: bool = False
    stream: bool = False


def _parse_size(token):
    m = re.fullmatch(r"(\d+)([kKmMgG]?)", token.strip())
    if not m:
        raise ParseError(f"malformed partition size {token!r}")
    size = int(m.group(1)) * _SIZE_SUFFIX[m.group(2).lower()]
    if size <= 0:
        raise ParseError(f"partition size must be positive, got {token!r}")
    return size


def _parse_bool(key, token):
    t = token.strip().lower()
    if t in ("true", "1"):
        return True
    if t in ("false", "0"):
        return False
    raise ParseError(f"{key} expects true/false, got {token!r}")


def parse_data_spec(text: str) -> DataSpec:
    """Parse ``"path[,partition=600m][,random=true][,stream=false]"``."""
    parts = str(text).split(",")
    path = parts[0].strip()
    if not path:
        raise ParseError(f"data spec {text!r} has no path")
    opts = {}
    for tok in parts[1:]:
        if "=" not in tok:
            raise ParseError(f"data spec option {tok!r} is not key=value")
        key, value = (s.strip() for s in tok.split("=", 1))
        if key == "partition":
            opts["partition_bytes"] = _parse_size(value)
        elif key in ("random", "stream"):
            opts[key] = _parse_bool(key, value)
        else:
            raise ParseError(f"unknown data spec key {key!r}")
    return DataSpec(path, **opts)


@dataclasses.dataclass
class Partition:
    ordinal: int
    frames: FrameTable

    @property
    def records(self):
        return self.frames.records()

    def __len__(self):
        return len(self.frames)


def partition_lengths(num_frames, rec_size, partition_bytes):
    per = max(1, partition_bytes // rec_size)
    full, rest = divmod(num_frames, per)
    return [per] * full + ([rest] if rest else [])


class PFileSource:
    """Multi-pass partition reader for one :class:`DataSpec`.

    Without ``stream`` the archive is loaded once and re-sliced on every
    pass.  With ``stream`` each pass reads partitions from disk on a
    background thread, one partition ahead of the consumer; at most two
    partitions (current and prefetched) are resident at any time.
    ``resident_bytes`` / ``peak_resident_bytes`` count serialized record bytes
    currently held by the reader.
    """

    def __init__(self, spec):
        if isinstance(spec, str):
            spec = parse_data_spec(spec)
        self.spec = spec
        self.header = read_header(spec.path)
        self._table = None
        self._lock = threading.Lock()
        self.resident_bytes = 0
        self.peak_resident_bytes = 0

    @property
    def num_frames(self):
        return self.header.num_frames

    def _account(self, delta):
        with self._lock:
            self.resident_bytes += delta
            self.peak_resident_bytes = max(self.peak_resident_bytes, self.resident_bytes)

    def lengths(self):
        return partition_lengths(self.header.num_frames, self.header.record_size,
                                 self.spec.partition_bytes)

    def table(self):
        """The whole archive (loaded once, non-stream mode)."""
        if self._table is None:
            _, self._table = read_pfile(self.spec.path)
            self._account(len(self._table) * self.header.record_size)
        return self._table

    def partitions(self, rng: Optional[SeededRng] = None, shuffle=None) -> Iterator[Partition]:
        """One pass; ``shuffle`` defaults to the spec's ``random`` flag."""
        shuffle = self.spec.random if shuffle is None else shuffle
        if shuffle and rng is None:
            raise DomainError("shuffled reading requires an rng")
        source = self._stream() if self.spec.stream else self._resident()
        for ordinal, frames in enumerate(source):
            if shuffle and len(frames) > 1:
                frames = frames.take(rng.permutation(len(frames)))
            yield Partition(ordinal, frames)

    def _resident(self):
        table = self.table()
        start = 0
        for n in self.lengths():
            yield table.take(slice(start, start + n))
            start += n

    def _stream(self):
        header = self.header
        rsize = header.record_size
        lengths = self.lengths()
        slots = threading.Semaphore(2)
        handoff = queue.Queue(maxsize=1)
        stop = threading.Event()
        done = object()

        def produce():
            try:
                with open(self.spec.path, "rb") as fh:
                    fh.seek(HEADER_SIZE)
                    for n in lengths:
                        slots.acquire()
                        if stop.is_set():
                            return
                        buf = fh.read(n * rsize)
                        if len(buf) != n * rsize:
                            raise CorruptArchiveError("archive shrank while streaming", fh.tell())
                        self._account(n * rsize)
                        handoff.put((_decode_records(buf, header), n * rsize))
                handoff.put(done)
            except BaseException as exc:  # forwarded to the consumer
                handoff.put(exc)

        worker = threading.Thread(target=produce, name="pfile-prefetch", daemon=True)
        worker.start()
        held = 0
        try:
            while True:
                item = handoff.get()
                if held:
                    self._account(-held)
                    held = 0
                    slots.release()
                if item is done:
                    break
                if isinstance(item, BaseException):
                    raise item
                frames, held = item
                yield frames
        finally:
            stop.set()
            if held:
                self._account(-held)
            slots.release()
            slots.release()
            while worker.is_alive():
                try:
                    item = handoff.get(timeout=0.05)
                except queue.Empty:
                    continue
                if isinstance(item, tuple):
                    self._account(-item[1])
                    slots.release()
            worker.join()


def read_partitions(spec, rng: Optional[SeededRng] = None) -> Iterator[Partition]:
    """One pass over the archive described by ``spec``."""
    return PFileSource(spec).partitions(rng)


# ---------------------------------------------------------------------------
# splicing
# ---------------------------------------------------------------------------

def splice(table: FrameTable, context: int) -> FrameTable:
    """Concatenate every frame with its ``context`` neighbours on each side.

    Neighbours past an utterance edge repeat the edge frame.  Output
    dimension is ``(2 * context + 1) * d``; labels and indices are kept.
    """
    if context < 0:
        raise DomainError(f"splice context must be >= 0, got {context}")
    n, d = table.features.shape
    if n == 0:
        return table.with_features(np.zeros((0, (2 * context + 1) * d)))
    if context == 0:
        return table.with_features(table.features.copy())
    starts, ends = utterance_bounds(table.utt)
    lengths = ends - starts
    row_start = np.repeat(starts, lengths)
    row_end = np.repeat(ends, lengths) - 1
    rows = np.arange(n)
    offsets = np.arange(-context, context + 1)
    idx = np.clip(rows[:, None] + offsets[None, :], row_start[:, None], row_end[:, None])
    return table.with_features(table.features[idx].reshape(n, (2 * context + 1) * d))


def stream_write_pfile(path, header: PFileHeader, tables) -> PFileHeader:
    """Write ``header`` then each FrameTable chunk in order, atomically.

    The caller guarantees the chunks concatenate to a valid archive matching
    ``header``; only the frame count and feature width are re-checked.
    """
    dtype = _record_dtype(header.feature_dim, header.label_present)
    written = [0]

    def chunks():
        yield header.pack()
        for table in tables:
            if table.feature_dim != header.feature_dim:
                raise ValidationError(
                    f"chunk has {table.feature_dim} features, header says {header.feature_dim}"
                )
            rec = np.zeros(len(table), dtype=dtype)
            rec["utt"] = table.utt
            rec["frame"] = table.frame
            rec["feat"] = table.features.astype(np.float32)
            if header.label_present:
                rec["label"] = table.labels
            written[0] += len(table)
            yield rec.tobytes()
        if written[0] != header.num_frames:
            raise ValidationError(f"wrote {written[0]} frames, header says {header.num_frames}")

    atomic_write_bytes(path, chunks())
    return header
