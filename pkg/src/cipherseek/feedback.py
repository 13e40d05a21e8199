"""Query-feedback learning and automatic weight updates.

Observation turns ranked results into per-document residuals (how far a
document's learned rank lags its observed popularity) and rank floats.
Update steps then move match scores toward the popularity fixed point
through a clamped or sign activation, one document at a time or in
synchronized sweeps, and commits push the corresponding increments into the
ciphertexts — cloud-side, without downloading any index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .aspe import (
    CLOUD_RAW,
    OWNER_EXACT,
    EncryptedIncrement,
    apply_increment,
    raw_increment,
)
from .errors import (
    ChannelError,
    DomainError,
    InvalidParameterError,
    StaleFeedbackError,
    UnknownDocumentError,
)
from .queries import ResultList
from .ranking import RankedStore

TRADITIONAL = "traditional"


def sgn(x: float) -> float:
    """Sign activation; by convention sgn(0) = +1."""
    return -1.0 if x < 0 else 1.0


def satlins(x: float) -> float:
    """Saturating linear activation: clamp to [-1, 1]."""
    if x < -1.0:
        return -1.0
    if x > 1.0:
        return 1.0
    return x


_ACTIVATIONS = {"sgn": sgn, "satlins": satlins}


@dataclass(frozen=True)
class WunConfig:
    """Weight-update behavior: work mode, activation, rate, stop rule."""

    mode: str = "async"
    activation: str = "satlins"
    eta: float = 0.1
    max_sweeps: int = 100
    stability_tol: float = 1e-4

    def __post_init__(self):
        if self.mode not in ("async", "sync"):
            raise InvalidParameterError(f"unknown work mode {self.mode!r}")
        if self.activation not in _ACTIVATIONS:
            raise InvalidParameterError(f"unknown activation {self.activation!r}")
        if self.eta <= 0:
            raise InvalidParameterError("eta must be > 0")
        if self.max_sweeps < 1:
            raise InvalidParameterError("max_sweeps must be >= 1")


@dataclass(frozen=True)
class FeedbackRecord:
    """One round of ranked results plus the store ranks they were drawn from."""

    round: int
    result: ResultList
    store_ranks_at_query: Dict[str, int]
    store_version: int


@dataclass
class PopularityState:
    """Decayed hit counts per document plus the residual learning rate."""

    decay: float = 1.0
    eta: float = 1.0
    hit_counts: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.decay <= 1:
            raise InvalidParameterError("decay must be in (0, 1]")
        if self.eta <= 0:
            raise InvalidParameterError("eta must be > 0")

    def observe(self, doc_ids) -> None:
        if self.decay < 1.0:
            for key in self.hit_counts:
                self.hit_counts[key] *= self.decay
        for doc_id in doc_ids:
            self.hit_counts[doc_id] = self.hit_counts.get(doc_id, 0.0) + 1.0

    def empirical_ranks(self) -> Dict[str, int]:
        """Observed docs ordered by hit count descending, ties by doc_id."""
        ordered = sorted(self.hit_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return {doc_id: rank for rank, (doc_id, _) in enumerate(ordered)}


@dataclass(frozen=True)
class UpdateTarget:
    """Per-document score residuals and rank floats for one feedback round."""

    residuals: Dict[str, float]
    rank_floats: Dict[str, int]
    round: int


@dataclass(frozen=True)
class AdversaryState:
    """Discriminator values and the two rank-bucket distributions."""

    discriminator: np.ndarray
    index_dist: np.ndarray
    query_dist: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.discriminator, dtype=np.float64)
        p_i = np.asarray(self.index_dist, dtype=np.float64)
        p_q = np.asarray(self.query_dist, dtype=np.float64)
        object.__setattr__(self, "discriminator", a)
        object.__setattr__(self, "index_dist", p_i)
        object.__setattr__(self, "query_dist", p_q)
        if not (a.shape == p_i.shape == p_q.shape):
            raise InvalidParameterError("bucket counts differ across fields")
        if np.any(a <= 0.0) or np.any(a >= 1.0):
            raise DomainError("discriminator values must lie in the open (0, 1)")
        for name, p in (("index_dist", p_i), ("query_dist", p_q)):
            if abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
                raise InvalidParameterError(f"{name} is not a probability vector")


def adversarial_value(adv: AdversaryState) -> float:
    """Game value sum(p_i * ln A) + sum(p_q * ln(1 - A)).

    The sorter's transport is the identity on rank buckets, so this is a
    diagnostic of how separable the learned ranking is from the observed
    query ranking. A is clamped away from {0, 1} for log safety.
    """
    a = np.clip(adv.discriminator, 1e-6, 1.0 - 1e-6)
    return float(np.dot(adv.index_dist, np.log(a))
                 + np.dot(adv.query_dist, np.log1p(-a)))


def equilibrium_discriminator(p_i: np.ndarray, p_q: np.ndarray) -> np.ndarray:
    """The maximizing discriminator p_i / (p_i + p_q), clamped to (0, 1)."""
    p_i = np.asarray(p_i, dtype=np.float64)
    p_q = np.asarray(p_q, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        a = p_i / (p_i + p_q)
    a[~np.isfinite(a)] = 0.5
    return np.clip(a, 1e-6, 1.0 - 1e-6)


def _rank_quantiles(ranks: Dict[str, int], n: int) -> Dict[str, float]:
    """Map rank r in [0, n) to a share in [0, 1]: top rank -> 1, bottom -> 0."""
    if n <= 1:
        return {d: 1.0 for d in ranks}
    return {d: 1.0 - r / (n - 1) for d, r in ranks.items()}


def san_observe(store: RankedStore, fb: FeedbackRecord,
                pop: PopularityState) -> UpdateTarget:
    """Fold one round of results into the popularity state and emit targets.

    The residual for a document is eta times the gap between its normalized
    hit share and its normalized match-score share (both rank-quantile
    normalized over the store), which is zero exactly when learned rank and
    observed popularity agree. The rank float is the signed store-vs-
    empirical rank difference.
    """
    if fb.store_version != store.version:
        raise StaleFeedbackError(
            f"feedback observed store version {fb.store_version}, "
            f"current is {store.version}"
        )
    pop.observe(fb.result.doc_ids)
    if not pop.hit_counts:
        return UpdateTarget(residuals={}, rank_floats={}, round=fb.round)

    emp_ranks = pop.empirical_ranks()
    store_ranks = store.ranks()
    n = len(store)
    hit_share = _rank_quantiles(emp_ranks, n)
    score_share = _rank_quantiles(store_ranks, n)

    residuals: Dict[str, float] = {}
    rank_floats: Dict[str, int] = {}
    for doc_id in emp_ranks:
        if doc_id not in store_ranks:
            raise UnknownDocumentError(f"feedback references unknown doc {doc_id!r}")
        residuals[doc_id] = pop.eta * (hit_share[doc_id] - score_share[doc_id])
        rank_floats[doc_id] = store_ranks[doc_id] - emp_ranks[doc_id]
    return UpdateTarget(residuals=residuals, rank_floats=rank_floats, round=fb.round)


def _score_frame(store: RankedStore) -> Tuple[float, float]:
    lo = float(store.match_scores.min())
    hi = float(store.match_scores.max())
    if hi - lo < 1e-12:
        # degenerate frame: treat every score as mid-range
        return lo - 1.0, hi + 1.0
    return lo, hi


def _normalize(score: float, lo: float, hi: float) -> float:
    return 2.0 * (score - lo) / (hi - lo) - 1.0


def _denormalize(value: float, lo: float, hi: float) -> float:
    return lo + (value + 1.0) * (hi - lo) / 2.0


def wun_async_step(store: RankedStore, target: UpdateTarget, doc_id: str,
                   cfg: WunConfig) -> RankedStore:
    """Update a single document's match score; all others keep theirs.

    net = normalized current score + eta * residual, passed through the
    configured activation in the [-1, 1] frame and mapped back to score
    space, then the store is re-sorted.
    """
    if doc_id not in target.residuals:
        raise UnknownDocumentError(f"doc {doc_id!r} is not in the update target")
    activation = _ACTIVATIONS[cfg.activation]
    lo, hi = _score_frame(store)
    current = float(store.match_scores[store.row_of(doc_id)])
    net = _normalize(current, lo, hi) + cfg.eta * target.residuals[doc_id]
    new_score = _denormalize(activation(net), lo, hi)
    if new_score == current:
        return store
    return store.with_scores(_override(store, {doc_id: new_score}))


def wun_sync_step(store: RankedStore, target: UpdateTarget,
                  cfg: WunConfig) -> Tuple[RankedStore, bool, int]:
    """Parallel sweeps: every targeted document updates from the pre-sweep
    state, repeated until the largest normalized change drops below the
    stability tolerance or the sweep budget runs out."""
    activation = _ACTIVATIONS[cfg.activation]
    rows = {store.row_of(d): r for d, r in target.residuals.items()}
    scores = store.match_scores.copy()
    stabilized = False
    sweeps = 0
    for sweeps in range(1, cfg.max_sweeps + 1):
        lo, hi = _score_frame_arr(scores)
        max_change = 0.0
        new_scores = scores.copy()
        for row, residual in rows.items():
            norm = _normalize(float(scores[row]), lo, hi)
            net = norm + cfg.eta * residual
            out = activation(net)
            max_change = max(max_change, abs(out - norm))
            new_scores[row] = _denormalize(out, lo, hi)
        scores = new_scores
        if max_change < cfg.stability_tol:
            stabilized = True
            break
    return store.with_scores(scores), stabilized, sweeps


def _score_frame_arr(scores: np.ndarray) -> Tuple[float, float]:
    lo = float(scores.min())
    hi = float(scores.max())
    if hi - lo < 1e-12:
        return lo - 1.0, hi + 1.0
    return lo, hi


def _override(store: RankedStore, changes: Dict[str, float]) -> np.ndarray:
    new_scores = store.match_scores.copy()
    for doc_id, value in changes.items():
        new_scores[store.row_of(doc_id)] = value
    return new_scores


@dataclass
class CommitReceipt:
    """What a commit touched and what it cost on the wire."""

    mode: str
    docs: Tuple[str, ...]
    bytes_up: int = 0
    bytes_down_index: int = 0
    score_shift_error: float = 0.0


def cloud_raw_increments(store: RankedStore, score_deltas: Dict[str, float]):
    """Key-free ciphertext increments for the requested score shifts.

    Without the key the cloud cannot target an exact plaintext delta, so the
    shift is applied along each stored ciphertext's own direction; the
    resulting score change only approximates the requested one, and callers
    measure rather than assume the error.
    """
    out = {}
    for doc_id, delta in score_deltas.items():
        row = store.row_of(doc_id)
        c1 = store.c1[row]
        c2 = store.c2[row]
        norm = math.sqrt(float(np.dot(c1, c1) + np.dot(c2, c2)))
        if norm < 1e-12:
            out[doc_id] = raw_increment(np.zeros_like(c1), np.zeros_like(c2))
        else:
            scale = delta / norm
            out[doc_id] = raw_increment(c1 * scale, c2 * scale)
    return out


def apply_store_increments(store: RankedStore,
                           increments: Dict[str, EncryptedIncrement],
                           channel: str) -> RankedStore:
    """Apply per-document ciphertext increments, returning a new store."""
    from .aspe import EncryptedIndex

    c1 = store.c1.copy()
    c2 = store.c2.copy()
    for doc_id, inc in increments.items():
        row = store.row_of(doc_id)
        base = EncryptedIndex(c1=c1[row], c2=c2[row], doc_id=doc_id)
        updated = apply_increment(base, inc, channel)
        c1[row] = updated.c1
        c2[row] = updated.c2
    return store.with_ciphertexts(c1, c2)


def target_score_deltas(store: RankedStore, target: UpdateTarget,
                        cfg: WunConfig) -> Dict[str, float]:
    """Residuals mapped to match-score units: the linear (pre-activation)
    score movement of the corresponding update step."""
    lo, hi = _score_frame(store)
    half_width = (hi - lo) / 2.0
    return {
        doc_id: cfg.eta * residual * half_width
        for doc_id, residual in target.residuals.items()
        if residual != 0.0
    }


def wun_commit(store: RankedStore, target: UpdateTarget, channel: str,
               counters, cfg: WunConfig, owner=None) -> RankedStore:
    """Persist a round's updates into the ciphertexts.

    cloud-raw derives key-free increments in place: nothing moves on the
    wire and in particular no index is ever downloaded. owner-exact asks the
    owner channel to encrypt the deltas (upload traffic only). traditional
    is the download-decrypt-reupload baseline and is the only path that
    touches bytes_down_index.
    """
    deltas = target_score_deltas(store, target, cfg)
    if not deltas:
        return store
    if channel == CLOUD_RAW:
        increments = cloud_raw_increments(store, deltas)
        return apply_store_increments(store, increments, CLOUD_RAW)
    if channel == OWNER_EXACT:
        if owner is None:
            raise ChannelError("owner-exact commit needs an owner channel")
        increments, upload = owner.encrypt_score_deltas(deltas)
        counters.bytes_up += upload
        return apply_store_increments(store, increments, OWNER_EXACT)
    if channel == TRADITIONAL:
        if owner is None:
            raise ChannelError("traditional update needs an owner channel")
        from .aspe import EncryptedIndex

        c1 = store.c1.copy()
        c2 = store.c2.copy()
        for doc_id, delta in deltas.items():
            row = store.row_of(doc_id)
            old = EncryptedIndex(c1=c1[row], c2=c2[row], doc_id=doc_id)
            counters.bytes_down_index += old.nbytes()
            replacement, upload = owner.reencrypt_with_delta(old, doc_id, delta)
            counters.bytes_up += upload
            c1[row] = replacement.c1
            c2[row] = replacement.c2
        return store.with_ciphertexts(c1, c2)
    raise ChannelError(f"unknown update channel {channel!r}")
