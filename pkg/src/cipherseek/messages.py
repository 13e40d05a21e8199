"""Serialized messages crossing the owner / user / cloud boundary.

Every agent interaction goes through these byte-level frames, which is what
the traffic counters meter. Cloud blindness is structural: no inbound cloud
message has a field that could carry a plaintext vector or key matrix —
only ciphertext halves, trapdoor halves, ids, scores, and counts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import InvalidParameterError

_HEADER = struct.Struct("<4sB")

_T_INDEX_BATCH = 1
_T_TRAPDOOR_BATCH = 2
_T_QUERY = 3
_T_RESULTS = 4
_T_ENC_INCREMENT = 5
_T_INDEX_REPLACE = 6
_T_INDEX_DOWNLOAD = 7

_MAGIC = b"CSMG"


def _pack_ids(ids: Sequence[str]) -> bytes:
    parts = [struct.pack("<I", len(ids))]
    for doc_id in ids:
        raw = doc_id.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def _unpack_ids(blob: bytes, off: int) -> Tuple[List[str], int]:
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    ids = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", blob, off)
        off += 2
        ids.append(blob[off : off + ln].decode("utf-8"))
        off += ln
    return ids, off


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    header = struct.pack("<BII", a.ndim, a.shape[0], a.shape[1] if a.ndim > 1 else 0)
    return header + a.tobytes()


def _unpack_array(blob: bytes, off: int) -> Tuple[np.ndarray, int]:
    ndim, d0, d1 = struct.unpack_from("<BII", blob, off)
    off += struct.calcsize("<BII")
    count = d0 * (d1 if ndim > 1 else 1)
    arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
    off += count * 8
    if ndim > 1:
        arr = arr.reshape(d0, d1)
    return arr, off


def _frame(type_code: int, payload: bytes) -> bytes:
    return _HEADER.pack(_MAGIC, type_code) + payload


def _open_frame(blob: bytes, expect: int) -> int:
    magic, code = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise InvalidParameterError("not a message frame")
    if code != expect:
        raise InvalidParameterError(f"expected message type {expect}, got {code}")
    return _HEADER.size


@dataclass(frozen=True)
class IndexBatchMsg:
    """Owner -> cloud: encrypted index upload."""

    doc_ids: Tuple[str, ...]
    c1: np.ndarray
    c2: np.ndarray

    def pack(self) -> bytes:
        return _frame(_T_INDEX_BATCH,
                      _pack_ids(self.doc_ids) + _pack_array(self.c1) + _pack_array(self.c2))

    @classmethod
    def unpack(cls, blob: bytes) -> "IndexBatchMsg":
        off = _open_frame(blob, _T_INDEX_BATCH)
        ids, off = _unpack_ids(blob, off)
        c1, off = _unpack_array(blob, off)
        c2, off = _unpack_array(blob, off)
        return cls(doc_ids=tuple(ids), c1=c1, c2=c2)


@dataclass(frozen=True)
class TrapdoorBatchMsg:
    """Owner -> cloud: a block of random training trapdoors."""

    t1: np.ndarray
    t2: np.ndarray

    def pack(self) -> bytes:
        return _frame(_T_TRAPDOOR_BATCH, _pack_array(self.t1) + _pack_array(self.t2))

    @classmethod
    def unpack(cls, blob: bytes) -> "TrapdoorBatchMsg":
        off = _open_frame(blob, _T_TRAPDOOR_BATCH)
        t1, off = _unpack_array(blob, off)
        t2, off = _unpack_array(blob, off)
        return cls(t1=t1, t2=t2)


@dataclass(frozen=True)
class QueryMsg:
    """User -> cloud: trapdoor halves plus strategy parameters."""

    t1: np.ndarray
    t2: np.ndarray
    k: int
    strategy: str
    beta: float = 1.0
    prune_margin: float = 0.0

    def pack(self) -> bytes:
        strat = self.strategy.encode("utf-8")
        payload = (
            struct.pack("<IH", self.k, len(strat)) + strat
            + struct.pack("<dd", self.beta, self.prune_margin)
            + _pack_array(self.t1) + _pack_array(self.t2)
        )
        return _frame(_T_QUERY, payload)

    @classmethod
    def unpack(cls, blob: bytes) -> "QueryMsg":
        off = _open_frame(blob, _T_QUERY)
        k, slen = struct.unpack_from("<IH", blob, off)
        off += struct.calcsize("<IH")
        strategy = blob[off : off + slen].decode("utf-8")
        off += slen
        beta, prune_margin = struct.unpack_from("<dd", blob, off)
        off += 16
        t1, off = _unpack_array(blob, off)
        t2, off = _unpack_array(blob, off)
        return cls(t1=t1, t2=t2, k=k, strategy=strategy,
                   beta=beta, prune_margin=prune_margin)


@dataclass(frozen=True)
class ResultsMsg:
    """Cloud -> user: ranked doc ids and their scores."""

    doc_ids: Tuple[str, ...]
    scores: np.ndarray
    retrieved_index_count: int

    def pack(self) -> bytes:
        payload = (struct.pack("<I", self.retrieved_index_count)
                   + _pack_ids(self.doc_ids) + _pack_array(np.atleast_1d(self.scores)))
        return _frame(_T_RESULTS, payload)

    @classmethod
    def unpack(cls, blob: bytes) -> "ResultsMsg":
        off = _open_frame(blob, _T_RESULTS)
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        ids, off = _unpack_ids(blob, off)
        scores, off = _unpack_array(blob, off)
        return cls(doc_ids=tuple(ids), scores=scores, retrieved_index_count=count)


@dataclass(frozen=True)
class EncIncrementMsg:
    """Owner -> cloud: an owner-exact encrypted increment for one index."""

    doc_id: str
    d1: np.ndarray
    d2: np.ndarray

    def pack(self) -> bytes:
        return _frame(_T_ENC_INCREMENT,
                      _pack_ids([self.doc_id]) + _pack_array(self.d1) + _pack_array(self.d2))

    @classmethod
    def unpack(cls, blob: bytes) -> "EncIncrementMsg":
        off = _open_frame(blob, _T_ENC_INCREMENT)
        ids, off = _unpack_ids(blob, off)
        d1, off = _unpack_array(blob, off)
        d2, off = _unpack_array(blob, off)
        return cls(doc_id=ids[0], d1=d1, d2=d2)


@dataclass(frozen=True)
class IndexReplaceMsg:
    """Owner -> cloud: a freshly encrypted replacement index (baseline path)."""

    doc_id: str
    c1: np.ndarray
    c2: np.ndarray

    def pack(self) -> bytes:
        return _frame(_T_INDEX_REPLACE,
                      _pack_ids([self.doc_id]) + _pack_array(self.c1) + _pack_array(self.c2))

    @classmethod
    def unpack(cls, blob: bytes) -> "IndexReplaceMsg":
        off = _open_frame(blob, _T_INDEX_REPLACE)
        ids, off = _unpack_ids(blob, off)
        c1, off = _unpack_array(blob, off)
        c2, off = _unpack_array(blob, off)
        return cls(doc_id=ids[0], c1=c1, c2=c2)


@dataclass(frozen=True)
class IndexDownloadMsg:
    """Cloud -> owner: a stored ciphertext, only ever sent by the
    download-decrypt-reupload baseline."""

    doc_id: str
    c1: np.ndarray
    c2: np.ndarray

    def pack(self) -> bytes:
        return _frame(_T_INDEX_DOWNLOAD,
                      _pack_ids([self.doc_id]) + _pack_array(self.c1) + _pack_array(self.c2))

    @classmethod
    def unpack(cls, blob: bytes) -> "IndexDownloadMsg":
        off = _open_frame(blob, _T_INDEX_DOWNLOAD)
        ids, off = _unpack_ids(blob, off)
        c1, off = _unpack_array(blob, off)
        c2, off = _unpack_array(blob, off)
        return cls(doc_id=ids[0], c1=c1, c2=c2)


# Everything a cloud agent will ever accept. Auditable: ciphertexts,
# trapdoors, ids, scalar parameters — nothing else fits through.
CLOUD_INBOUND = (IndexBatchMsg, TrapdoorBatchMsg, QueryMsg,
                 EncIncrementMsg, IndexReplaceMsg)
