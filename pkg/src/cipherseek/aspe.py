"""Split-vector inner-product-preserving encryption.

A secret key holds a split indicator and two invertible matrices. Index
vectors are split into complementary shares and pushed through the matrix
transposes; query vectors take the complementary split through the matrix
inverses. The ciphertext inner product then reproduces the plaintext inner
product exactly (up to float rounding), which is what every ranking and
query operation in this package relies on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionError,
    IncrementModeError,
    InvalidParameterError,
    KeyGenerationError,
)
from .kernels import paired_dot

MAX_CONDITION = 1e4
MAX_KEYGEN_ATTEMPTS = 100

OWNER_EXACT = "owner-exact"
CLOUD_RAW = "cloud-raw"

_KEY_MAGIC = b"CSKY"
_KEY_VERSION = 1


@dataclass(frozen=True)
class SecretKey:
    """Split indicator plus the two invertible matrices and their inverses."""

    dim: int
    split: np.ndarray          # uint8 bits, length dim
    m1: np.ndarray             # (dim, dim) float64
    m2: np.ndarray
    m1_inv: np.ndarray
    m2_inv: np.ndarray
    seed: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, SecretKey):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.seed == other.seed
            and np.array_equal(self.split, other.split)
            and np.array_equal(self.m1, other.m1)
            and np.array_equal(self.m2, other.m2)
        )

    def inverse_residual(self) -> float:
        """max over both matrices of the induced-infinity norm of M.M^-1 - I."""
        eye = np.eye(self.dim)
        r1 = np.abs(self.m1 @ self.m1_inv - eye).sum(axis=1).max()
        r2 = np.abs(self.m2 @ self.m2_inv - eye).sum(axis=1).max()
        return float(max(r1, r2))

    @classmethod
    def identity(cls, dim: int) -> "SecretKey":
        """Test hook: identity matrices and an all-zero split indicator.

        Scoring under this key reduces to the plain dot product exactly.
        """
        if dim < 1:
            raise InvalidParameterError("dimension must be >= 1")
        eye = np.eye(dim)
        return cls(
            dim=dim,
            split=np.zeros(dim, dtype=np.uint8),
            m1=eye.copy(),
            m2=eye.copy(),
            m1_inv=eye.copy(),
            m2_inv=eye.copy(),
            seed=0,
        )


@dataclass
class PlainVector:
    """A length-V weight vector, either an index or a query."""

    values: np.ndarray
    role: str  # "index" | "query"
    doc_id: Optional[str] = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.role not in ("index", "query"):
            raise InvalidParameterError(f"unknown vector role {self.role!r}")


@dataclass(frozen=True)
class EncryptedIndex:
    """The two ciphertext halves of an index vector."""

    c1: np.ndarray
    c2: np.ndarray
    doc_id: Optional[str] = None

    @property
    def dim(self) -> int:
        return self.c1.shape[0]

    def nbytes(self) -> int:
        return int(self.c1.nbytes + self.c2.nbytes)


@dataclass(frozen=True)
class Trapdoor:
    """The two ciphertext halves of a query vector plus the result count."""

    t1: np.ndarray
    t2: np.ndarray
    k: int = 1

    @property
    def dim(self) -> int:
        return self.t1.shape[0]

    def nbytes(self) -> int:
        return int(self.t1.nbytes + self.t2.nbytes)


@dataclass(frozen=True)
class EncryptedIncrement:
    """A ciphertext-space additive update for one index vector.

    owner-exact increments are produced under the key and shift scores by
    exactly dot(delta, Q); cloud-raw increments are built without key
    material and only approximate the intended score change.
    """

    d1: np.ndarray
    d2: np.ndarray
    mode: str = OWNER_EXACT

    def __post_init__(self):
        if self.mode not in (OWNER_EXACT, CLOUD_RAW):
            raise InvalidParameterError(f"unknown increment mode {self.mode!r}")


def _estimate_condition(m: np.ndarray, m_inv: np.ndarray, iters: int = 10) -> float:
    """2-norm condition estimate via power iteration on M^T M and M^-1 M^-T."""
    n = m.shape[0]
    if n == 1:
        a = abs(float(m[0, 0]))
        return np.inf if a == 0.0 else 1.0
    rng = np.random.default_rng(0xC04D)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    w = v.copy()
    for _ in range(iters):
        v = m.T @ (m @ v)
        v /= np.linalg.norm(v)
        w = m_inv @ (m_inv.T @ w)
        w /= np.linalg.norm(w)
    smax = np.linalg.norm(m @ v)
    sinv = np.linalg.norm(m_inv.T @ w)
    return float(smax * sinv)


def _draw_invertible(rng: np.random.Generator, dim: int):
    """Draw U(-1,1) matrices until the condition estimate clears the bound."""
    for _ in range(MAX_KEYGEN_ATTEMPTS):
        m = rng.uniform(-1.0, 1.0, size=(dim, dim))
        try:
            m_inv = np.linalg.inv(m)
        except np.linalg.LinAlgError:
            continue
        cond = _estimate_condition(m, m_inv)
        if cond <= MAX_CONDITION:
            return np.ascontiguousarray(m), np.ascontiguousarray(m_inv), cond
    raise KeyGenerationError(
        f"no matrix of dimension {dim} with condition <= {MAX_CONDITION:g} "
        f"found in {MAX_KEYGEN_ATTEMPTS} attempts"
    )


def keygen(dim: int, seed: int) -> SecretKey:
    """Generate a secret key for vectors of length `dim`.

    Deterministic for a fixed seed. Matrices are rejection-sampled so that
    the condition estimate stays at or below 1e4; ill-conditioned keys would
    wreck the ciphertext scoring tolerance.
    """
    if dim < 1:
        raise InvalidParameterError("key dimension must be >= 1")
    rng = np.random.default_rng(seed)
    split = (rng.random(dim) < 0.5).astype(np.uint8)
    m1, m1_inv, _ = _draw_invertible(rng, dim)
    m2, m2_inv, _ = _draw_invertible(rng, dim)
    return SecretKey(dim=dim, split=split, m1=m1, m2=m2,
                     m1_inv=m1_inv, m2_inv=m2_inv, seed=seed)


def extended_keygen(sk: SecretKey, extra: int, seed: int) -> SecretKey:
    """Extend a key by `extra` dictionary slots.

    The old matrices survive as the top-left blocks, so zero-padded old
    ciphertexts stay valid and score identically; only the fresh bottom-right
    blocks are drawn (with the same conditioning rejection, applied to the
    combined block-diagonal matrix).
    """
    if extra < 0:
        raise InvalidParameterError("extension size must be >= 0")
    if extra == 0:
        return sk
    rng = np.random.default_rng(seed)
    new_split = np.concatenate([sk.split, (rng.random(extra) < 0.5).astype(np.uint8)])

    def extend(m: np.ndarray, m_inv: np.ndarray):
        for _ in range(MAX_KEYGEN_ATTEMPTS):
            block = rng.uniform(-1.0, 1.0, size=(extra, extra))
            try:
                block_inv = np.linalg.inv(block)
            except np.linalg.LinAlgError:
                continue
            big = np.zeros((sk.dim + extra, sk.dim + extra))
            big[: sk.dim, : sk.dim] = m
            big[sk.dim :, sk.dim :] = block
            big_inv = np.zeros_like(big)
            big_inv[: sk.dim, : sk.dim] = m_inv
            big_inv[sk.dim :, sk.dim :] = block_inv
            if _estimate_condition(big, big_inv) <= MAX_CONDITION:
                return np.ascontiguousarray(big), np.ascontiguousarray(big_inv)
        raise KeyGenerationError(
            f"no acceptable {extra}x{extra} extension block found "
            f"in {MAX_KEYGEN_ATTEMPTS} attempts"
        )

    new_m1, new_m1_inv = extend(sk.m1, sk.m1_inv)
    new_m2, new_m2_inv = extend(sk.m2, sk.m2_inv)
    return SecretKey(dim=sk.dim + extra, split=new_split,
                     m1=new_m1, m2=new_m2, m1_inv=new_m1_inv, m2_inv=new_m2_inv,
                     seed=seed)


def _check_dim(values: np.ndarray, sk: SecretKey):
    if values.shape[-1] != sk.dim:
        raise DimensionError(
            f"vector length {values.shape[-1]} does not match key dimension {sk.dim}"
        )


def split_index(vector: PlainVector, sk: SecretKey, seed: int):
    """Share an index vector: copied at split=0 slots, randomized at split=1."""
    values = vector.values
    _check_dim(values, sk)
    rng = np.random.default_rng(seed)
    bound = float(np.abs(values).max()) if values.size else 0.0
    draws = rng.uniform(-bound, bound, size=sk.dim)
    mask = sk.split == 1
    v1 = np.where(mask, draws, values)
    v2 = np.where(mask, values - draws, values)
    return v1, v2


def split_query(vector: PlainVector, sk: SecretKey, seed: int):
    """Share a query vector with the complementary rule to split_index."""
    values = vector.values
    _check_dim(values, sk)
    rng = np.random.default_rng(seed)
    bound = float(np.abs(values).max()) if values.size else 0.0
    draws = rng.uniform(-bound, bound, size=sk.dim)
    mask = sk.split == 0
    v1 = np.where(mask, draws, values)
    v2 = np.where(mask, values - draws, values)
    return v1, v2


def encrypt_index(vector: PlainVector, sk: SecretKey, seed: int) -> EncryptedIndex:
    v1, v2 = split_index(vector, sk, seed)
    return EncryptedIndex(
        c1=np.ascontiguousarray(sk.m1.T @ v1),
        c2=np.ascontiguousarray(sk.m2.T @ v2),
        doc_id=vector.doc_id,
    )


def encrypt_indexes(vectors: Sequence[PlainVector], sk: SecretKey, seed: int):
    """Encrypt a batch of index vectors in blocked matrix form.

    Returns (doc_ids, C1, C2) with C1/C2 of shape (n, dim). Much faster than
    per-vector calls for large corpora; the per-slot splitting rule is the
    same as split_index.
    """
    n = len(vectors)
    values = np.stack([v.values for v in vectors]) if n else np.zeros((0, sk.dim))
    _check_dim(values, sk)
    rng = np.random.default_rng(seed)
    bounds = np.abs(values).max(axis=1, keepdims=True) if n else np.zeros((0, 1))
    draws = rng.uniform(-1.0, 1.0, size=values.shape) * bounds
    mask = sk.split == 1
    v1 = np.where(mask, draws, values)
    v2 = np.where(mask, values - draws, values)
    c1 = np.ascontiguousarray(v1 @ sk.m1)
    c2 = np.ascontiguousarray(v2 @ sk.m2)
    doc_ids = [v.doc_id for v in vectors]
    return doc_ids, c1, c2


def make_trapdoor(vector: PlainVector, k: int, sk: SecretKey, seed: int) -> Trapdoor:
    if k < 1:
        raise InvalidParameterError("trapdoor k must be >= 1")
    q1, q2 = split_query(vector, sk, seed)
    return Trapdoor(
        t1=np.ascontiguousarray(sk.m1_inv @ q1),
        t2=np.ascontiguousarray(sk.m2_inv @ q2),
        k=k,
    )


def make_trapdoors(queries: np.ndarray, sk: SecretKey, seed: int):
    """Encrypt a (m, dim) batch of plain query vectors; returns (T1, T2)."""
    _check_dim(queries, sk)
    rng = np.random.default_rng(seed)
    bounds = np.abs(queries).max(axis=1, keepdims=True)
    draws = rng.uniform(-1.0, 1.0, size=queries.shape) * bounds
    mask = sk.split == 0
    q1 = np.where(mask, draws, queries)
    q2 = np.where(mask, queries - draws, queries)
    t1 = np.ascontiguousarray(q1 @ sk.m1_inv.T)
    t2 = np.ascontiguousarray(q2 @ sk.m2_inv.T)
    return t1, t2


def score(index: EncryptedIndex, trapdoor: Trapdoor) -> float:
    """Ciphertext match score: equals the plaintext dot(I, Q) within rounding."""
    if index.dim != trapdoor.dim:
        raise DimensionError(
            f"index dimension {index.dim} does not match trapdoor {trapdoor.dim}"
        )
    return paired_dot(index.c1, index.c2, trapdoor.t1, trapdoor.t2)


def encrypt_increment(delta: np.ndarray, sk: SecretKey, seed: int) -> EncryptedIncrement:
    """Owner-side encryption of an additive index update."""
    vec = PlainVector(values=delta, role="index")
    v1, v2 = split_index(vec, sk, seed)
    return EncryptedIncrement(
        d1=np.ascontiguousarray(sk.m1.T @ v1),
        d2=np.ascontiguousarray(sk.m2.T @ v2),
        mode=OWNER_EXACT,
    )


def raw_increment(d1: np.ndarray, d2: np.ndarray) -> EncryptedIncrement:
    """Cloud-side increment assembled without any key material."""
    return EncryptedIncrement(
        d1=np.ascontiguousarray(d1, dtype=np.float64),
        d2=np.ascontiguousarray(d2, dtype=np.float64),
        mode=CLOUD_RAW,
    )


def apply_increment(index: EncryptedIndex, inc: EncryptedIncrement,
                    channel: str = OWNER_EXACT) -> EncryptedIndex:
    """Coordinate-wise ciphertext addition; returns a new index.

    The caller declares its channel; applying an increment through the wrong
    channel is a misuse error rather than silent corruption.
    """
    if inc.mode != channel:
        raise IncrementModeError(
            f"{inc.mode} increment cannot be applied through the {channel} channel"
        )
    if index.c1.shape != inc.d1.shape:
        raise DimensionError("increment dimension does not match index")
    return EncryptedIndex(
        c1=index.c1 + inc.d1,
        c2=index.c2 + inc.d2,
        doc_id=index.doc_id,
    )


def save_key(sk: SecretKey, path) -> None:
    """Write the key container: header, packed split bits, row-major matrices."""
    packed = np.packbits(sk.split)
    with open(path, "wb") as fh:
        fh.write(_KEY_MAGIC)
        fh.write(struct.pack("<BIq", _KEY_VERSION, sk.dim, sk.seed))
        fh.write(packed.tobytes())
        fh.write(np.ascontiguousarray(sk.m1, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(sk.m2, dtype="<f8").tobytes())


def load_key(path) -> SecretKey:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _KEY_MAGIC:
        raise InvalidParameterError(f"{path} is not a key file")
    version, dim, seed = struct.unpack_from("<BIq", blob, 4)
    if version != _KEY_VERSION:
        raise InvalidParameterError(f"unsupported key file version {version}")
    off = 4 + struct.calcsize("<BIq")
    nbits = (dim + 7) // 8
    split = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=nbits, offset=off))[:dim]
    off += nbits
    m1 = np.frombuffer(blob, dtype="<f8", count=dim * dim, offset=off).reshape(dim, dim)
    off += dim * dim * 8
    m2 = np.frombuffer(blob, dtype="<f8", count=dim * dim, offset=off).reshape(dim, dim)
    m1 = np.ascontiguousarray(m1)
    m2 = np.ascontiguousarray(m2)
    return SecretKey(
        dim=dim,
        split=split.astype(np.uint8),
        m1=m1,
        m2=m2,
        m1_inv=np.linalg.inv(m1),
        m2_inv=np.linalg.inv(m2),
        seed=seed,
    )
