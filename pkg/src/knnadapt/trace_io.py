"""Serialized prediction events from a black-box LM: read, write, validate.

Binary trace (little-endian, fixed stride per record):
    magic "KNNT" | version u32 | vocab u32 | d u32 | mode u8 (0 full, 1 top_q) |
    q u32 (0 when full) | count u64 | records | CRC32 u32 over all prior bytes
    record (full):  d x f32 embedding | u32 gold | vocab x f32 probs
    record (top_q): d x f32 embedding | u32 gold | q x (u32 token, f32 prob)

Embedding-matrix file:
    magic "KNNW" | version u32 | vocab u32 | d u32 | vocab*d x f32 row-major | CRC32 u32

The JSONL mirror is a debug view: a header object on the first line, then one
object per record with keys embedding, gold, probs or topq, optional context.
Context token ids are carried only by the JSONL encoding; binary records have
a fixed stride and omit them. Probabilities are stored linearly, not as logs.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .core import SparseTopQ
from .errors import ConsistencyViolation, Corrupt, FormatVersionMismatch

TRACE_MAGIC = b"KNNT"
MATRIX_MAGIC = b"KNNW"
VERSION = 1
MODES = ("full", "top_q")

# f32 payloads accumulate rounding; probability-sum checks use this tolerance.
F32_MASS_TOL = 1e-3

_TRACE_HEADER = struct.Struct("<4sIIIBIQ")
_MATRIX_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class TraceHeader:
    vocab_size: int
    d: int
    mode: str
    q: int
    count: int

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown access mode {self.mode!r}")
        if self.mode == "top_q" and not 1 <= self.q <= self.vocab_size:
            raise FormatVersionMismatch(f"top_q header requires 1 <= q <= vocab, got q={self.q}")
        if self.mode == "full" and self.q != 0:
            raise FormatVersionMismatch("full-access header must carry q=0")


@dataclass(frozen=True)
class TraceRecord:
    """One prediction event: context embedding, gold token, LM probabilities."""

    embedding: np.ndarray  # float32, length d
    gold: int
    probs: np.ndarray | SparseTopQ  # dense float64 vector, or a top-q slice
    context: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "embedding", np.asarray(self.embedding, dtype=np.float32).ravel())
        if isinstance(self.probs, np.ndarray):
            object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))


@dataclass
class Trace:
    header: TraceHeader
    records: list[TraceRecord]


def _record_struct(header: TraceHeader) -> np.dtype:
    if header.mode == "full":
        return np.dtype(
            [("emb", "<f4", (header.d,)), ("gold", "<u4"), ("probs", "<f4", (header.vocab_size,))]
        )
    return np.dtype(
        [
            ("emb", "<f4", (header.d,)),
            ("gold", "<u4"),
            ("entries", [("tok", "<u4"), ("prob", "<f4")], (header.q,)),
        ]
    )


def _check_record(header: TraceHeader, i: int, rec: TraceRecord) -> None:
    """Structural consistency only; semantic checks belong to validate_trace."""
    if rec.embedding.size != header.d:
        raise ConsistencyViolation(f"record {i}: embedding length {rec.embedding.size} != d={header.d}")
    if not 0 <= rec.gold < header.vocab_size:
        raise ConsistencyViolation(f"record {i}: gold {rec.gold} outside vocabulary")
    if header.mode == "full":
        if not isinstance(rec.probs, np.ndarray) or rec.probs.size != header.vocab_size:
            raise ConsistencyViolation(f"record {i}: full-mode record needs a dense probability vector")
    else:
        if not isinstance(rec.probs, SparseTopQ) or rec.probs.q != header.q:
            raise ConsistencyViolation(f"record {i}: top_q record needs exactly q={header.q} entries")
        if np.any(rec.probs.token_ids >= header.vocab_size):
            raise ConsistencyViolation(f"record {i}: top-q token outside vocabulary")


def write_trace(
    header: TraceHeader,
    records: Sequence[TraceRecord],
    path: str | Path,
    encoding: str = "binary",
) -> None:
    if len(records) != header.count:
        raise ConsistencyViolation(f"header declares {header.count} records, got {len(records)}")
    for i, rec in enumerate(records):
        _check_record(header, i, rec)
    if encoding == "binary":
        _write_binary(header, records, path)
    elif encoding == "jsonl":
        _write_jsonl(header, records, path)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")


def _write_binary(header, records, path):
    dtype = _record_struct(header)
    head = _TRACE_HEADER.pack(
        TRACE_MAGIC, VERSION, header.vocab_size, header.d,
        MODES.index(header.mode), header.q, header.count,
    )
    with open(path, "wb") as fh:
        fh.write(head)
        crc = zlib.crc32(head)
        for rec in records:
            buf = np.zeros(1, dtype=dtype)
            buf["emb"][0] = rec.embedding
            buf["gold"][0] = rec.gold
            if header.mode == "full":
                buf["probs"][0] = rec.probs.astype(np.float32)
            else:
                buf["entries"][0]["tok"] = rec.probs.token_ids
                buf["entries"][0]["prob"] = rec.probs.probs.astype(np.float32)
            raw = buf.tobytes()
            fh.write(raw)
            crc = zlib.crc32(raw, crc)
        fh.write(struct.pack("<I", crc))


def _write_jsonl(header, records, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({
            "format": "knnadapt-trace",
            "version": VERSION,
            "vocab_size": header.vocab_size,
            "d": header.d,
            "mode": header.mode,
            "q": header.q,
            "count": header.count,
        }) + "\n")
        for rec in records:
            obj = {"embedding": [float(v) for v in rec.embedding], "gold": int(rec.gold)}
            if header.mode == "full":
                obj["probs"] = [float(v) for v in rec.probs]
            else:
                obj["topq"] = [[int(t), float(p)] for t, p in zip(rec.probs.token_ids, rec.probs.probs)]
            if rec.context is not None:
                obj["context"] = list(rec.context)
            fh.write(json.dumps(obj) + "\n")


def read_trace(path: str | Path) -> tuple[TraceHeader, Iterator[TraceRecord]]:
    """Header plus a streaming record iterator (O(record) memory).

    For binary traces the checksum is verified when the iterator is exhausted;
    truncation is reported at the offending record index.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        sniff = fh.read(4)
    if sniff == TRACE_MAGIC:
        return _read_binary(path)
    return _read_jsonl(path)


def _read_binary(path: Path) -> tuple[TraceHeader, Iterator[TraceRecord]]:
    fh = open(path, "rb")
    head = fh.read(_TRACE_HEADER.size)
    if len(head) < _TRACE_HEADER.size:
        fh.close()
        raise Corrupt(f"{path}: too short to hold a trace header")
    magic, version, vocab, d, mode_code, q, count = _TRACE_HEADER.unpack(head)
    if magic != TRACE_MAGIC:
        fh.close()
        raise Corrupt(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        fh.close()
        raise FormatVersionMismatch(f"{path}: unsupported version {version}")
    if mode_code >= len(MODES):
        fh.close()
        raise FormatVersionMismatch(f"{path}: unknown mode code {mode_code}")
    header = TraceHeader(vocab_size=vocab, d=d, mode=MODES[mode_code], q=q, count=count)
    dtype = _record_struct(header)

    def gen():
        crc = zlib.crc32(head)
        try:
            for i in range(count):
                raw = fh.read(dtype.itemsize)
                if len(raw) < dtype.itemsize:
                    raise Corrupt(f"{path}: truncated at record {i}")
                crc = zlib.crc32(raw, crc)
                rec = np.frombuffer(raw, dtype=dtype)[0]
                if header.mode == "full":
                    probs = rec["probs"].astype(np.float64)
                else:
                    try:
                        probs = SparseTopQ(
                            token_ids=rec["entries"]["tok"].astype(np.int64),
                            probs=rec["entries"]["prob"].astype(np.float64),
                        )
                    except ValueError as exc:
                        raise ConsistencyViolation(f"{path}: record {i}: {exc}") from exc
                yield TraceRecord(embedding=rec["emb"].copy(), gold=int(rec["gold"]), probs=probs)
            tail = fh.read(4)
            if len(tail) < 4:
                raise Corrupt(f"{path}: missing checksum")
            if struct.unpack("<I", tail)[0] != crc:
                raise Corrupt(f"{path}: checksum mismatch")
        finally:
            fh.close()

    return header, gen()


def _read_jsonl(path: Path) -> tuple[TraceHeader, Iterator[TraceRecord]]:
    fh = open(path, "r", encoding="utf-8")
    first = fh.readline()
    try:
        meta = json.loads(first)
    except json.JSONDecodeError as exc:
        fh.close()
        raise Corrupt(f"{path}: not a trace file") from exc
    if meta.get("format") != "knnadapt-trace":
        fh.close()
        raise Corrupt(f"{path}: not a trace file")
    if meta.get("version") != VERSION:
        fh.close()
        raise FormatVersionMismatch(f"{path}: unsupported version {meta.get('version')}")
    header = TraceHeader(
        vocab_size=meta["vocab_size"], d=meta["d"], mode=meta["mode"],
        q=meta["q"], count=meta["count"],
    )

    def gen():
        try:
            n = 0
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                if "probs" in obj:
                    probs = np.asarray(obj["probs"], dtype=np.float64)
                else:
                    pairs = obj["topq"]
                    probs = SparseTopQ(
                        token_ids=np.asarray([t for t, _ in pairs], dtype=np.int64),
                        probs=np.asarray([p for _, p in pairs], dtype=np.float64),
                    )
                ctx = tuple(obj["context"]) if "context" in obj else None
                yield TraceRecord(
                    embedding=np.asarray(obj["embedding"], dtype=np.float32),
                    gold=int(obj["gold"]), probs=probs, context=ctx,
                )
                n += 1
            if n != header.count:
                raise Corrupt(f"{path}: header declares {header.count} records, found {n}")
        finally:
            fh.close()

    return header, gen()


def load_trace(path: str | Path) -> Trace:
    header, it = read_trace(path)
    return Trace(header=header, records=list(it))


@dataclass(frozen=True)
class TraceViolation:
    record_index: int
    kind: str  # "token_range" | "mass" | "order" | "negative"
    message: str


@dataclass
class TraceValidationReport:
    path: str
    records_checked: int
    violations: list[TraceViolation]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_trace(path: str | Path, strict: bool = False) -> TraceValidationReport:
    """Per-record conformance scan; strict mode stops at the first violation.

    Works on the raw payload so malformed records are tallied, not raised.
    """
    path = Path(path)
    report = TraceValidationReport(path=str(path), records_checked=0, violations=[])
    for i, (gold, ids, probs) in enumerate(_iter_raw(path)):
        report.records_checked += 1
        bad = []
        if not 0 <= gold:
            bad.append(("token_range", f"gold {gold} negative"))
        if ids is None:  # full mode
            total = float(probs.sum())
            if np.any(probs < 0):
                bad.append(("negative", "negative probability entry"))
            if abs(total - 1.0) > F32_MASS_TOL:
                bad.append(("mass", f"probabilities sum to {total:.6f}"))
        else:
            if np.any(ids < 0) or len(np.unique(ids)) != ids.size:
                bad.append(("token_range", "duplicate or negative top-q token id"))
            if np.any(probs < 0):
                bad.append(("negative", "negative probability entry"))
            if np.any(np.diff(probs) > 0):
                bad.append(("order", "top-q probabilities not descending"))
            if float(probs.sum()) > 1.0 + F32_MASS_TOL:
                bad.append(("mass", f"top-q probabilities sum to {float(probs.sum()):.6f}"))
        for kind, msg in bad:
            report.violations.append(TraceViolation(record_index=i, kind=kind, message=msg))
        if strict and report.violations:
            break
    return report


def _iter_raw(path: Path):
    """Yield (gold, top-q ids or None, probs) without semantic validation."""
    with open(path, "rb") as fh:
        binary = fh.read(4) == TRACE_MAGIC
    if binary:
        raw = path.read_bytes()
        if len(raw) < _TRACE_HEADER.size + 4:
            raise Corrupt(f"{path}: too short to hold a trace header")
        magic, version, vocab, d, mode_code, q, count = _TRACE_HEADER.unpack_from(raw)
        if version != VERSION:
            raise FormatVersionMismatch(f"{path}: unsupported version {version}")
        header = TraceHeader(vocab_size=vocab, d=d, mode=MODES[mode_code], q=q, count=count)
        dtype = _record_struct(header)
        body = count * dtype.itemsize
        if len(raw) != _TRACE_HEADER.size + body + 4:
            raise Corrupt(f"{path}: wrong length for {count} records")
        (stored,) = struct.unpack_from("<I", raw, _TRACE_HEADER.size + body)
        if zlib.crc32(raw[: _TRACE_HEADER.size + body]) != stored:
            raise Corrupt(f"{path}: checksum mismatch")
        recs = np.frombuffer(raw, dtype=dtype, count=count, offset=_TRACE_HEADER.size)
        for rec in recs:
            if header.mode == "full":
                yield int(rec["gold"]), None, rec["probs"].astype(np.float64)
            else:
                yield (
                    int(rec["gold"]),
                    rec["entries"]["tok"].astype(np.int64),
                    rec["entries"]["prob"].astype(np.float64),
                )
    else:
        header, _ = _read_jsonl(path)
        with open(path, "r", encoding="utf-8") as fh:
            fh.readline()
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                if "probs" in obj:
                    yield int(obj["gold"]), None, np.asarray(obj["probs"], dtype=np.float64)
                else:
                    pairs = obj["topq"]
                    yield (
                        int(obj["gold"]),
                        np.asarray([t for t, _ in pairs], dtype=np.int64),
                        np.asarray([p for _, p in pairs], dtype=np.float64),
                    )


def save_embedding_matrix(W: np.ndarray, path: str | Path) -> None:
    """Token-embedding matrix (vocab x d) as fixed-layout f32."""
    W32 = np.ascontiguousarray(np.asarray(W), dtype="<f4")
    if W32.ndim != 2:
        raise ConsistencyViolation("embedding matrix must be 2-d")
    head = _MATRIX_HEADER.pack(MATRIX_MAGIC, VERSION, W32.shape[0], W32.shape[1])
    body = W32.tobytes()
    crc = zlib.crc32(body, zlib.crc32(head))
    Path(path).write_bytes(head + body + struct.pack("<I", crc))


def load_embedding_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _MATRIX_HEADER.size + 4:
        raise Corrupt(f"{path}: too short to hold a matrix header")
    magic, version, vocab, d = _MATRIX_HEADER.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise Corrupt(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatVersionMismatch(f"{path}: unsupported version {version}")
    body = vocab * d * 4
    if len(raw) != _MATRIX_HEADER.size + body + 4:
        raise Corrupt(f"{path}: wrong length for a {vocab}x{d} matrix")
    (stored,) = struct.unpack_from("<I", raw, _MATRIX_HEADER.size + body)
    if zlib.crc32(raw[: _MATRIX_HEADER.size + body]) != stored:
        raise Corrupt(f"{path}: checksum mismatch")
    W = np.frombuffer(raw, dtype="<f4", count=vocab * d, offset=_MATRIX_HEADER.size)
    return W.reshape(vocab, d).copy()
