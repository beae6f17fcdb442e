"""Key-value store of (context embedding, next token) pairs with exact top-k search.

On-disk layout (little-endian):
    magic "KNDS" | version u32 | metric u8 (0=squared_l2, 1=l2) | d u32 |
    count u64 | count x (d x f32 key, u32 token) | CRC32 u32 over all prior bytes
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import Corrupt, DimensionMismatch, EmptyInput, FormatVersionMismatch, KTooLarge

MAGIC = b"KNDS"
VERSION = 1
METRICS = ("squared_l2", "l2")

_HEADER = struct.Struct("<4sIBIQ")


@dataclass(frozen=True)
class Neighbor:
    distance: float
    token: int
    entry_index: int


@dataclass(frozen=True)
class NeighborSet:
    """The k retrieved neighbors, ascending by (distance, entry_index)."""

    distances: np.ndarray  # float64, ascending
    tokens: np.ndarray  # int64
    entry_indices: np.ndarray  # int64

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=np.float64)
        if np.any(np.diff(d) < 0):
            raise ValueError("neighbor distances must be ascending")
        object.__setattr__(self, "distances", d)
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64))
        object.__setattr__(self, "entry_indices", np.asarray(self.entry_indices, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.distances.size)

    def __getitem__(self, i: int) -> Neighbor:
        return Neighbor(float(self.distances[i]), int(self.tokens[i]), int(self.entry_indices[i]))


@dataclass(frozen=True)
class Datastore:
    """Write-once store; keys are float32 so save/load round-trips bit-exactly."""

    keys: np.ndarray  # float32, shape (n, d)
    tokens: np.ndarray  # uint32, shape (n,)
    metric: str = "squared_l2"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        # distances are computed in float64; convert once, not per query
        object.__setattr__(self, "_keys64", np.asarray(self.keys, dtype=np.float64))

    def __len__(self) -> int:
        return int(self.keys.shape[0])

    @property
    def d(self) -> int:
        return int(self.keys.shape[1])


def build(records, metric: str = "squared_l2") -> Datastore:
    """Assemble a datastore from (embedding, token id) pairs in input order."""
    records = list(records)
    if not records:
        raise EmptyInput("cannot build a datastore from zero records")
    d = np.asarray(records[0][0]).size
    keys = np.empty((len(records), d), dtype=np.float32)
    tokens = np.empty(len(records), dtype=np.uint32)
    for i, (key, token) in enumerate(records):
        vec = np.asarray(key, dtype=np.float32).ravel()
        if vec.size != d:
            raise DimensionMismatch(f"record {i} has dimension {vec.size}, expected {d}")
        keys[i] = vec
        tokens[i] = token
    return Datastore(keys=keys, tokens=tokens, metric=metric)


def query_knn(ds: Datastore, query: np.ndarray, k: int) -> NeighborSet:
    """Exact k smallest distances, ascending, ties broken by entry index."""
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.size != ds.d:
        raise DimensionMismatch(f"query dimension {q.size} != datastore dimension {ds.d}")
    n = len(ds)
    if not 1 <= k <= n:
        raise KTooLarge(f"k={k} not in [1, {n}]")
    diffs = ds._keys64 - q
    dist = np.einsum("ij,ij->i", diffs, diffs)
    if k < n:
        part = np.argpartition(dist, k - 1)
        kth = dist[part[k - 1]]
        # include every entry tied at the boundary so the index tie-break is exact
        cand = np.flatnonzero(dist <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, dist[cand]))[:k]
    idx = cand[order]
    top = dist[idx]
    if ds.metric == "l2":
        top = np.sqrt(top)
    return NeighborSet(distances=top, tokens=ds.tokens[idx].astype(np.int64), entry_indices=idx.astype(np.int64))


def save(ds: Datastore, path: str | Path) -> None:
    rec_dtype = np.dtype([("key", "<f4", (ds.d,)), ("token", "<u4")])
    recs = np.empty(len(ds), dtype=rec_dtype)
    recs["key"] = ds.keys
    recs["token"] = ds.tokens
    head = _HEADER.pack(MAGIC, VERSION, METRICS.index(ds.metric), ds.d, len(ds))
    body = recs.tobytes()
    crc = zlib.crc32(body, zlib.crc32(head))
    Path(path).write_bytes(head + body + struct.pack("<I", crc))


def load(path: str | Path) -> Datastore:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise Corrupt(f"{path}: too short to hold a datastore header")
    magic, version, metric_code, d, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise Corrupt(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatVersionMismatch(f"{path}: unsupported version {version}")
    if metric_code >= len(METRICS):
        raise FormatVersionMismatch(f"{path}: unknown metric code {metric_code}")
    rec_dtype = np.dtype([("key", "<f4", (d,)), ("token", "<u4")])
    body_len = count * rec_dtype.itemsize
    expected = _HEADER.size + body_len + 4
    if len(raw) != expected:
        raise Corrupt(f"{path}: expected {expected} bytes, found {len(raw)}")
    (stored_crc,) = struct.unpack_from("<I", raw, _HEADER.size + body_len)
    if zlib.crc32(raw[: _HEADER.size + body_len]) != stored_crc:
        raise Corrupt(f"{path}: checksum mismatch")
    recs = np.frombuffer(raw, dtype=rec_dtype, count=count, offset=_HEADER.size)
    return Datastore(
        keys=recs["key"].reshape(count, d).copy(),
        tokens=recs["token"].copy(),
        metric=METRICS[metric_code],
    )
