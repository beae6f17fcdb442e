"""Writers for the knnadapt on-disk formats (little-endian, CRC32-terminated).

Implemented independently of the consumer so conformance is a real check:
    trace  "KNNT" | u32 version=1 | u32 vocab | u32 d | u8 mode | u32 q |
           u64 count | records | CRC32 of all preceding bytes
           record: d x f32 embedding, u32 gold, then vocab x f32 probs (full)
           or q x (u32 token, f32 prob) (top_q)
    matrix "KNNW" | u32 version=1 | u32 vocab | u32 d | vocab*d x f32 | CRC32
    vocabulary: one token per line; frequency: "token_id<TAB>count" lines
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

TRACE_HEADER = struct.Struct("<4sIIIBIQ")
MATRIX_HEADER = struct.Struct("<4sIII")


class TraceWriter:
    """Streams records to a trace file; count is fixed up front."""

    def __init__(self, path, vocab_size: int, d: int, count: int, q: int = 0):
        self.path = Path(path)
        self.vocab_size = vocab_size
        self.d = d
        self.q = q
        self.count = count
        self.written = 0
        mode = 1 if q > 0 else 0
        head = TRACE_HEADER.pack(b"KNNT", 1, vocab_size, d, mode, q, count)
        self._fh = open(self.path, "wb")
        self._fh.write(head)
        self._crc = zlib.crc32(head)

    def _write(self, raw: bytes) -> None:
        self._fh.write(raw)
        self._crc = zlib.crc32(raw, self._crc)

    def add_full(self, embedding: np.ndarray, gold: int, probs: np.ndarray) -> None:
        assert self.q == 0 and probs.size == self.vocab_size
        self._write(np.ascontiguousarray(embedding, dtype="<f4").tobytes())
        self._write(struct.pack("<I", gold))
        self._write(np.ascontiguousarray(probs, dtype="<f4").tobytes())
        self.written += 1

    def add_topq(self, embedding: np.ndarray, gold: int, token_ids: np.ndarray, probs: np.ndarray) -> None:
        assert self.q > 0 and token_ids.size == self.q
        self._write(np.ascontiguousarray(embedding, dtype="<f4").tobytes())
        self._write(struct.pack("<I", gold))
        pairs = np.empty(self.q, dtype=[("tok", "<u4"), ("prob", "<f4")])
        pairs["tok"] = token_ids
        pairs["prob"] = probs
        self._write(pairs.tobytes())
        self.written += 1

    def close(self) -> None:
        if self._fh.closed:
            return
        if self.written != self.count:
            self._fh.close()
            raise ValueError(f"wrote {self.written} records, header declares {self.count}")
        self._fh.write(struct.pack("<I", self._crc))
        self._fh.close()

    def abort(self) -> None:
        """Close and remove the incomplete file."""
        if not self._fh.closed:
            self._fh.close()
        self.path.unlink(missing_ok=True)


def write_embedding_matrix(W: np.ndarray, path) -> None:
    W32 = np.ascontiguousarray(W, dtype="<f4")
    head = MATRIX_HEADER.pack(b"KNNW", 1, W32.shape[0], W32.shape[1])
    body = W32.tobytes()
    crc = zlib.crc32(body, zlib.crc32(head))
    Path(path).write_bytes(head + body + struct.pack("<I", crc))


def write_vocabulary(tokens, path) -> None:
    Path(path).write_text("\n".join(tokens) + "\n", encoding="utf-8")


def write_frequencies(counts, path) -> None:
    lines = [f"{i}\t{int(c)}" for i, c in enumerate(counts)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
