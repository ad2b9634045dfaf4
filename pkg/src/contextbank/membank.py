"""Long-term memory banks and short-term memory.

A :class:`LongTermBank` stores its entries column-wise (one numpy array per
field) so that horizon queries are a binary search plus a slice.  Embeddings
are held at float32: that is the frozen-feature precision, and it is what the
bank file stores, so a write/read round trip is bit-exact.

Bank file layout (all little-endian)::

    offset  size  field
    0       8     magic  b"CTXBANK\\0"
    8       2     version (u16, currently 1)
    10      2     reserved (u16, 0)
    12      4     d_feat (u32)
    16      4     capacity (u32)
    20      4     entry count (u32)
    24      2     camera id length in bytes (u16)
    26      2     strategy string length in bytes (u16)
    28      ...   camera id (utf-8), strategy (utf-8)
    ...     4     CRC-32 of every header byte before it plus the record block
    ...     ...   entry records, fixed width (see ``record_dtype``)

Each record: embedding f32[d_feat], code f64[9], frame_index i64, time_s f64,
timestamp i16[6] (year, month, day, hour, minute, second), box f64[6]
(x_center, y_center, width, height, image_width, image_height), score f64,
source_frame_id i64, predicted_class i32 (-1 when unset).
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .encoding import CODE_SIZE, BoxPx, SpatioTemporalCode, Timestamp, encode, flip_codes
from .numkit import ShapeError

MAGIC = b"CTXBANK\x00"
VERSION = 1
DEFAULT_CAPACITY = 8500
_HEAD = struct.Struct("<8sHHIIIHH")


class BankFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BankInputError(ValueError):
    pass


@dataclass(frozen=True)
class CurationStrategy:
    """Which per-frame detections enter the long-term bank.

    ``kind`` is one of ``top_k``, ``positive_only``, ``stride`` or ``all``.
    """

    kind: str
    k: int = 1
    threshold: float = 0.5
    stride: int = 1
    base: int = 0

    def __post_init__(self):
        if self.kind not in ("top_k", "positive_only", "stride", "all"):
            raise ValueError(f"unknown curation strategy {self.kind!r}")
        if self.k < 1:
            raise ValueError("top_k needs k >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")

    @classmethod
    def parse(cls, text: str) -> "CurationStrategy":
        """Parse ``"top_k:8"``, ``"stride:2"``, ``"stride:2:1"``, ``"positive_only:0.5"``, ``"all"``."""
        parts = text.strip().split(":")
        kind = parts[0]
        try:
            if kind == "all" and len(parts) == 1:
                return cls("all")
            if kind == "top_k" and len(parts) == 2:
                return cls("top_k", k=int(parts[1]))
            if kind == "positive_only" and len(parts) <= 2:
                return cls("positive_only", threshold=float(parts[1]) if len(parts) == 2 else 0.5)
            if kind == "stride" and len(parts) in (2, 3):
                return cls("stride", stride=int(parts[1]), base=int(parts[2]) if len(parts) == 3 else 0)
        except ValueError as exc:
            raise ValueError(f"bad strategy {text!r}: {exc}") from None
        raise ValueError(f"bad strategy {text!r}")

    def __str__(self) -> str:
        if self.kind == "top_k":
            return f"top_k:{self.k}"
        if self.kind == "positive_only":
            return f"positive_only:{self.threshold!r}"
        if self.kind == "stride":
            return f"stride:{self.stride}" + (f":{self.base}" if self.base else "")
        return "all"


@dataclass(frozen=True)
class Detection:
    """One frozen-extractor output for a frame."""

    embedding: np.ndarray
    box: BoxPx
    score: float
    predicted_class: Optional[int] = None


@dataclass(frozen=True)
class ContextEntry:
    embedding: np.ndarray
    code: SpatioTemporalCode
    timestamp: Timestamp
    frame_index: int
    time_s: float
    box: BoxPx
    score: float
    source_frame_id: int
    predicted_class: Optional[int] = None


def _ranked(detections: Sequence[Detection]) -> List[Detection]:
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    return [detections[i] for i in order]


def curate_frame(
    detections: Sequence[Detection],
    strategy: CurationStrategy,
    frame_index: int,
    timestamp: Timestamp,
    time_s: float,
    source_frame_id: int,
) -> List[ContextEntry]:
    ranked = _ranked(detections)
    if strategy.kind == "top_k":
        kept = ranked[: strategy.k]
    elif strategy.kind == "positive_only":
        kept = [d for d in ranked if d.score >= strategy.threshold]
    elif strategy.kind == "stride":
        kept = ranked[:1] if (frame_index - strategy.base) % strategy.stride == 0 else []
    else:
        kept = ranked
    return [
        ContextEntry(
            embedding=np.asarray(d.embedding, dtype=np.float32),
            code=encode(timestamp, d.box),
            timestamp=timestamp,
            frame_index=frame_index,
            time_s=float(time_s),
            box=d.box,
            score=float(d.score),
            source_frame_id=int(source_frame_id),
            predicted_class=d.predicted_class,
        )
        for d in kept
    ]


class LongTermBank:
    """Time-ordered per-camera bank of curated context entries."""

    def __init__(self, camera_id: str, d_feat: int, strategy: CurationStrategy,
                 capacity: int = DEFAULT_CAPACITY, *, embeddings=None, codes=None,
                 frame_index=None, time_s=None, timestamps=None, boxes=None, scores=None,
                 source_frame_id=None, predicted_class=None):
        self.camera_id = camera_id
        self.d_feat = int(d_feat)
        self.strategy = strategy
        self.capacity = int(capacity)
        n = 0 if embeddings is None else len(embeddings)

        def col(values, shape, dtype):
            arr = np.zeros((n,) + shape, dtype=dtype) if values is None else np.asarray(values, dtype=dtype)
            arr = arr.reshape((n,) + shape)
            arr.setflags(write=False)
            return arr

        self.embeddings = col(embeddings, (self.d_feat,), np.float32)
        self.codes = col(codes, (CODE_SIZE,), np.float64)
        self.frame_index = col(frame_index, (), np.int64)
        self.time_s = col(time_s, (), np.float64)
        self.timestamps = col(timestamps, (6,), np.int16)
        self.boxes = col(boxes, (6,), np.float64)
        self.scores = col(scores, (), np.float64)
        self.source_frame_id = col(source_frame_id, (), np.int64)
        self.predicted_class = col(predicted_class, (), np.int32) if predicted_class is not None \
            else col(np.full(n, -1), (), np.int32)
        if n > self.capacity:
            raise BankInputError(f"{n} entries exceed capacity {self.capacity}")
        if n > 1 and np.any(np.diff(self.frame_index) < 0):
            raise BankInputError("bank entries must be sorted by frame index")
        self._matrix = None

    def __len__(self) -> int:
        return len(self.embeddings)

    @property
    def d0(self) -> int:
        return self.d_feat + CODE_SIZE

    @property
    def matrix(self) -> np.ndarray:
        """``(len, d_feat + 9)`` float64 context rows: embedding then code."""
        if self._matrix is None:
            m = np.concatenate([self.embeddings.astype(np.float64), self.codes], axis=1)
            m.setflags(write=False)
            self._matrix = m
        return self._matrix

    def entry(self, i: int) -> ContextEntry:
        pc = int(self.predicted_class[i])
        return ContextEntry(
            embedding=self.embeddings[i].copy(),
            code=SpatioTemporalCode.from_array(self.codes[i]),
            timestamp=Timestamp(*(int(v) for v in self.timestamps[i])),
            frame_index=int(self.frame_index[i]),
            time_s=float(self.time_s[i]),
            box=BoxPx(*(float(v) for v in self.boxes[i])),
            score=float(self.scores[i]),
            source_frame_id=int(self.source_frame_id[i]),
            predicted_class=None if pc < 0 else pc,
        )

    @property
    def entries(self) -> List[ContextEntry]:
        return [self.entry(i) for i in range(len(self))]

    @classmethod
    def from_entries(cls, camera_id: str, d_feat: int, strategy: CurationStrategy,
                     entries: Sequence[ContextEntry], capacity: int = DEFAULT_CAPACITY) -> "LongTermBank":
        def ts(t: Timestamp):
            return (t.year, t.month, t.day, t.hour, t.minute, t.second)

        def bx(b: BoxPx):
            return (b.x_center, b.y_center, b.width, b.height, b.image_width, b.image_height)

        for e in entries:
            if len(e.embedding) != d_feat:
                raise ShapeError(f"entry embedding length {len(e.embedding)} != d_feat {d_feat}")
        n = len(entries)
        return cls(
            camera_id, d_feat, strategy, capacity,
            embeddings=np.array([e.embedding for e in entries], dtype=np.float32).reshape(n, d_feat),
            codes=np.array([e.code.to_array() for e in entries]).reshape(n, CODE_SIZE),
            frame_index=[e.frame_index for e in entries],
            time_s=[e.time_s for e in entries],
            timestamps=np.array([ts(e.timestamp) for e in entries]).reshape(n, 6),
            boxes=np.array([bx(e.box) for e in entries]).reshape(n, 6),
            scores=[e.score for e in entries],
            source_frame_id=[e.source_frame_id for e in entries],
            predicted_class=[-1 if e.predicted_class is None else e.predicted_class for e in entries],
        )

    def equals(self, other: "LongTermBank") -> bool:
        """Bitwise equality of all stored data and metadata."""
        if (self.camera_id, self.d_feat, str(self.strategy), self.capacity) != \
                (other.camera_id, other.d_feat, str(other.strategy), other.capacity):
            return False
        names = ("embeddings", "codes", "frame_index", "time_s", "timestamps", "boxes",
                 "scores", "source_frame_id", "predicted_class")
        return all(getattr(self, k).tobytes() == getattr(other, k).tobytes() for k in names)


def build_long_term(
    camera_frames: Iterable,
    feature_provider: Callable[[object], Sequence[Detection]],
    strategy: CurationStrategy,
    capacity: int = DEFAULT_CAPACITY,
    d_feat: Optional[int] = None,
    frame_filter: Optional[Callable[[object], bool]] = None,
) -> LongTermBank:
    """Run the frozen provider over a camera's frames and curate the results.

    Frames need ``camera_id``, ``frame_index``, ``frame_id``, ``time_s`` and
    ``timestamp`` attributes.  Empty frames are curated like any other frame.
    ``frame_filter`` (optional) drops whole frames, e.g. an oracle that keeps
    only frames with ground-truth objects.  When more than ``capacity``
    entries survive, the oldest are evicted.
    """
    camera_id = None
    entries: List[ContextEntry] = []
    for frame in camera_frames:
        if camera_id is None:
            camera_id = frame.camera_id
        elif frame.camera_id != camera_id:
            raise BankInputError(f"mixed camera ids: {camera_id!r} and {frame.camera_id!r}")
        if frame_filter is not None and not frame_filter(frame):
            continue
        dets = feature_provider(frame)
        if d_feat is None and dets:
            d_feat = len(dets[0].embedding)
        entries.extend(curate_frame(dets, strategy, frame.frame_index, frame.timestamp,
                                    frame.time_s, frame.frame_id))
    if d_feat is None:
        raise BankInputError("cannot infer d_feat from an empty frame stream")
    entries.sort(key=lambda e: e.frame_index)  # stable: keeps box rank within a frame
    if len(entries) > capacity:
        entries = entries[len(entries) - capacity:]
    return LongTermBank.from_entries(camera_id or "", d_feat, strategy, entries, capacity)


@dataclass(frozen=True)
class BankQuery:
    time_s: float
    horizon_s: float
    exclude_frame_id: Optional[int] = None
    causal: bool = False

    def __post_init__(self):
        if self.horizon_s < 0:
            raise ValueError("horizon must be non-negative")


@dataclass(frozen=True)
class BankContext:
    """Rows of a bank selected for one keyframe."""

    matrix: np.ndarray
    times: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return self.matrix.shape[0]


def query_bank(bank: LongTermBank, q: BankQuery) -> BankContext:
    t = bank.time_s
    lo = int(np.searchsorted(t, q.time_s - q.horizon_s, side="left"))
    hi = int(np.searchsorted(t, q.time_s if q.causal else q.time_s + q.horizon_s, side="right"))
    idx = np.arange(lo, hi)
    if q.exclude_frame_id is not None and len(idx):
        idx = idx[bank.source_frame_id[lo:hi] != q.exclude_frame_id]
    return BankContext(bank.matrix[idx], t[idx], idx)


def empty_context(d0: int) -> BankContext:
    return BankContext(np.zeros((0, d0)), np.zeros(0), np.zeros(0, dtype=np.int64))


@dataclass(frozen=True)
class ShortTermMemory:
    matrix: np.ndarray
    frame_ids: Tuple[int, ...]
    n_per_frame: int

    def block(self, i: int) -> np.ndarray:
        return self.matrix[i * self.n_per_frame:(i + 1) * self.n_per_frame]


MAX_SHORT_WINDOW = 5


def build_short_term(window_proposals: Sequence[np.ndarray], frame_ids: Sequence[int]) -> ShortTermMemory:
    """Stack pooled ``(n_per_frame, d)`` proposal blocks, one per frame, in order."""
    if not window_proposals:
        raise ShapeError("short-term window is empty")
    if len(window_proposals) > MAX_SHORT_WINDOW:
        raise ShapeError(f"short-term window of {len(window_proposals)} frames exceeds {MAX_SHORT_WINDOW}")
    if len(frame_ids) != len(window_proposals):
        raise ShapeError("one frame id per proposal block is required")
    blocks = [np.asarray(b, dtype=np.float64) for b in window_proposals]
    n, d = blocks[0].shape
    for b in blocks[1:]:
        if b.shape != (n, d):
            raise ShapeError(f"proposal block shape {b.shape} != {(n, d)}")
    return ShortTermMemory(np.concatenate(blocks, axis=0), tuple(int(f) for f in frame_ids), n)


def flip_bank(bank: LongTermBank) -> LongTermBank:
    """Mirror every entry horizontally: code x-center and box x-center."""
    boxes = np.array(bank.boxes, copy=True)
    boxes[:, 0] = boxes[:, 4] - boxes[:, 0]
    return LongTermBank(
        bank.camera_id, bank.d_feat, bank.strategy, bank.capacity,
        embeddings=bank.embeddings, codes=flip_codes(bank.codes), frame_index=bank.frame_index,
        time_s=bank.time_s, timestamps=bank.timestamps, boxes=boxes, scores=bank.scores,
        source_frame_id=bank.source_frame_id, predicted_class=bank.predicted_class,
    )


def record_dtype(d_feat: int) -> np.dtype:
    return np.dtype([
        ("embedding", "<f4", (d_feat,)),
        ("code", "<f8", (CODE_SIZE,)),
        ("frame_index", "<i8"),
        ("time_s", "<f8"),
        ("timestamp", "<i2", (6,)),
        ("box", "<f8", (6,)),
        ("score", "<f8"),
        ("source_frame_id", "<i8"),
        ("predicted_class", "<i4"),
    ])


def bank_to_bytes(bank: LongTermBank) -> bytes:
    cam = bank.camera_id.encode("utf-8")
    strat = str(bank.strategy).encode("utf-8")
    head = _HEAD.pack(MAGIC, VERSION, 0, bank.d_feat, bank.capacity, len(bank), len(cam), len(strat)) + cam + strat
    rec = np.zeros(len(bank), dtype=record_dtype(bank.d_feat))
    rec["embedding"] = bank.embeddings
    rec["code"] = bank.codes
    rec["frame_index"] = bank.frame_index
    rec["time_s"] = bank.time_s
    rec["timestamp"] = bank.timestamps
    rec["box"] = bank.boxes
    rec["score"] = bank.scores
    rec["source_frame_id"] = bank.source_frame_id
    rec["predicted_class"] = bank.predicted_class
    payload = rec.tobytes()
    crc = zlib.crc32(payload, zlib.crc32(head))
    return head + struct.pack("<I", crc) + payload


def bank_from_bytes(data: bytes) -> LongTermBank:
    if len(data) < _HEAD.size:
        raise BankFormatError("truncated header", len(data))
    magic, version, _, d_feat, capacity, count, cam_len, strat_len = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise BankFormatError("bad magic bytes", 0)
    if version != VERSION:
        raise BankFormatError(f"unsupported version {version}", 8)
    if d_feat < 1:
        raise BankFormatError("d_feat must be positive", 12)
    pos = _HEAD.size
    end_head = pos + cam_len + strat_len
    if len(data) < end_head + 4:
        raise BankFormatError("truncated header strings", len(data))
    try:
        camera_id = data[pos:pos + cam_len].decode("utf-8")
        strategy = CurationStrategy.parse(data[pos + cam_len:end_head].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise BankFormatError(f"bad header string: {exc}", pos) from None
    (crc,) = struct.unpack_from("<I", data, end_head)
    payload_start = end_head + 4
    payload = data[payload_start:]
    # checksum first: a corrupted size field must not drive any allocation
    checksum_ok = zlib.crc32(payload, zlib.crc32(data[:end_head])) == crc
    try:
        dtype = record_dtype(d_feat)
    except ValueError:
        raise BankFormatError(f"implausible d_feat {d_feat}", 12) from None
    expected = count * dtype.itemsize
    if len(payload) < expected:
        raise BankFormatError(
            f"truncated records: expected {expected} bytes, found {len(payload)}", len(data))
    if len(payload) > expected:
        raise BankFormatError("trailing bytes after records", payload_start + expected)
    if not checksum_ok:
        raise BankFormatError("checksum mismatch", end_head)
    if count > capacity:
        raise BankFormatError(f"entry count {count} exceeds capacity {capacity}", 20)
    rec = np.frombuffer(payload, dtype=dtype, count=count)
    try:
        return LongTermBank(
            camera_id, d_feat, strategy, capacity,
            embeddings=rec["embedding"].copy(), codes=rec["code"].copy(),
            frame_index=rec["frame_index"].copy(), time_s=rec["time_s"].copy(),
            timestamps=rec["timestamp"].copy(), boxes=rec["box"].copy(), scores=rec["score"].copy(),
            source_frame_id=rec["source_frame_id"].copy(), predicted_class=rec["predicted_class"].copy(),
        )
    except BankInputError as exc:
        raise BankFormatError(str(exc), payload_start) from None


def write_bank(bank: LongTermBank, path) -> None:
    """Write via a temporary file and rename, so readers never see a partial bank."""
    path = Path(path)
    data = bank_to_bytes(bank)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_bank(path) -> LongTermBank:
    return bank_from_bytes(Path(path).read_bytes())
