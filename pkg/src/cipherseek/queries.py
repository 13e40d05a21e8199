"""The five query strategies: linear scan, popularity-window scan, and
greedy depth-first tree searches over popularity-ordered or random leaves."""

from __future__ import annotations

import heapq
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .aspe import Trapdoor
from .errors import DimensionError, EmptyStoreError, InvalidParameterError
from .kernels import paired_dot, paired_gemv
from .ranking import RankedStore

LT_CI = "lt-ci"
PR_CI = "pr-ci"
PO_TREE_CI = "po-tree-ci"
PO_TREE_PI = "po-tree-pi"
RU_TREE_PI = "ru-tree-pi"
STRATEGIES = (RU_TREE_PI, PO_TREE_PI, PO_TREE_CI, PR_CI, LT_CI)


@dataclass(frozen=True)
class ResultList:
    """Top-k hits, sorted by score descending (ties by doc_id ascending)."""

    hits: Tuple[Tuple[str, float], ...]
    k: int

    @property
    def doc_ids(self) -> Tuple[str, ...]:
        return tuple(d for d, _ in self.hits)


@dataclass
class QueryStats:
    """Per-query instrumentation; tree nodes count toward retrieved indexes."""

    retrieved_index_count: int
    precision: Optional[float] = None
    elapsed_us: float = 0.0
    clamped: bool = False


@dataclass
class TreeNode:
    score_max: float
    row: int = -1          # store row for leaves, -1 for internal nodes
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.row >= 0


@dataclass
class IndexTree:
    """Balanced binary tree whose internal nodes carry the subtree-max
    learned match score."""

    root: TreeNode
    store: RankedStore
    leaf_order: str
    n_leaves: int
    depth: int


def _clamp_k(k: int, n: int) -> Tuple[int, bool]:
    if k < 1:
        raise InvalidParameterError("k must be >= 1")
    if k > n:
        warnings.warn(f"k={k} exceeds store size {n}; clamping")
        return n, True
    return k, False


def _check_trapdoor(store: RankedStore, t: Trapdoor):
    if t.dim != store.dim:
        raise DimensionError(
            f"trapdoor dimension {t.dim} does not match store dimension {store.dim}"
        )


def _top_k(scores: np.ndarray, rows: np.ndarray, store: RankedStore, k: int) -> ResultList:
    """Exact top-k of the scored rows, ties broken by doc_id ascending."""
    order = np.lexsort((store._id_rank[rows], -scores))[:k]
    hits = tuple(
        (store.doc_ids[int(rows[i])], float(scores[i])) for i in order
    )
    return ResultList(hits=hits, k=k)


def query_lt(store: RankedStore, t: Trapdoor, k: int) -> Tuple[ResultList, QueryStats]:
    """Linear traversal: scores every ciphertext. The ground-truth oracle."""
    _check_trapdoor(store, t)
    k, clamped = _clamp_k(k, len(store))
    start = time.perf_counter()
    scores = np.empty(len(store))
    paired_gemv(store.c1, store.c2, t.t1, t.t2, scores)
    result = _top_k(scores, np.arange(len(store)), store, k)
    elapsed = (time.perf_counter() - start) * 1e6
    stats = QueryStats(retrieved_index_count=len(store), precision=1.0,
                       elapsed_us=elapsed, clamped=clamped)
    return result, stats


def pr_window(n_docs: int, k: int, beta: float) -> int:
    """Scan width of the popularity-window strategy:
    W = min(D, max(k, ceil(beta * k * (1 + log2(D/k)))))."""
    if beta <= 0:
        raise InvalidParameterError("beta must be > 0")
    w = math.ceil(beta * k * (1.0 + math.log2(n_docs / k)))
    return min(n_docs, max(k, w))


def gdfs_budget(n_docs: int, k: int, scale: float, depth: int) -> int:
    """Node budget for tree searches; same k*log(D/k) shape as the scan
    window, scaled up because a tree pays internal nodes per useful leaf."""
    if scale <= 0:
        raise InvalidParameterError("budget scale must be > 0")
    raw = math.ceil(scale * k * (1.0 + math.log2(n_docs / k))) + depth + 1
    return min(2 * n_docs - 1, raw)


def query_pr(store: RankedStore, t: Trapdoor, k: int,
             beta: float = 1.0) -> Tuple[ResultList, QueryStats]:
    """Score only the W most popular entries and return the best k of them."""
    _check_trapdoor(store, t)
    k, clamped = _clamp_k(k, len(store))
    start = time.perf_counter()
    w = pr_window(len(store), k, beta)
    rows = store.order[:w]
    c1 = np.ascontiguousarray(store.c1[rows])
    c2 = np.ascontiguousarray(store.c2[rows])
    scores = np.empty(w)
    paired_gemv(c1, c2, t.t1, t.t2, scores)
    result = _top_k(scores, rows, store, k)
    elapsed = (time.perf_counter() - start) * 1e6
    stats = QueryStats(retrieved_index_count=w, precision=None,
                       elapsed_us=elapsed, clamped=clamped)
    return result, stats


def build_tree(store: RankedStore, leaf_order: str = "probabilistic",
               seed: int = 0) -> IndexTree:
    """Balanced binary tree over the store entries.

    Leaves follow the learned rank order, or a seeded permutation for the
    random baseline. Left subtrees get the largest power of two, which keeps
    the depth at ceil(log2 D).
    """
    n = len(store)
    if n == 0:
        raise EmptyStoreError("cannot build a tree over an empty store")
    if leaf_order == "probabilistic":
        rows = store.order.copy()
    elif leaf_order == "random":
        rng = np.random.default_rng(seed)
        rows = rng.permutation(len(store))
    else:
        raise InvalidParameterError(f"unknown leaf order {leaf_order!r}")

    scores = store.match_scores

    def build(lo: int, hi: int) -> Tuple[TreeNode, int]:
        if hi - lo == 1:
            row = int(rows[lo])
            return TreeNode(score_max=float(scores[row]), row=row), 1
        span = hi - lo
        half = 1 << ((span - 1).bit_length() - 1)
        left, dl = build(lo, lo + half)
        right, dr = build(lo + half, hi)
        node = TreeNode(score_max=max(left.score_max, right.score_max),
                        left=left, right=right)
        return node, 1 + max(dl, dr)

    root, height = build(0, n)
    return IndexTree(root=root, store=store, leaf_order=leaf_order,
                     n_leaves=n, depth=height - 1)


def ciphertext_scorer(store: RankedStore, t: Trapdoor) -> Callable[[int], float]:
    _check_trapdoor(store, t)
    c1, c2, t1, t2 = store.c1, store.c2, t.t1, t.t2
    return lambda row: paired_dot(c1[row], c2[row], t1, t2)


def plaintext_scorer(store: RankedStore, plain_vectors: np.ndarray,
                     query: np.ndarray) -> Callable[[int], float]:
    """Baseline scorer over plaintext index vectors (rows aligned with store)."""
    return lambda row: float(np.dot(plain_vectors[row], query))


def query_gdfs(tree: IndexTree, t: Optional[Trapdoor], k: int,
               prune_margin: float = 0.0,
               scorer: Optional[Callable[[int], float]] = None,
               node_budget: Optional[int] = None,
               ) -> Tuple[ResultList, QueryStats]:
    """Greedy depth-first search with popularity pruning.

    Children are visited in descending subtree-max order. Once k hits are
    held, a subtree is skipped when its subtree-max match score falls below
    prune_margin times the k-th best match score among the currently
    accepted leaves. An optional node budget caps the search outright: no
    node is expanded past it (the budget is floored so at least k leaves can
    be reached). Every expanded node, internal or leaf, counts as one
    retrieved index; pruned subtrees are never expanded and never counted.
    """
    store = tree.store
    if scorer is None:
        if t is None:
            raise InvalidParameterError("query_gdfs needs a trapdoor or a scorer")
        scorer = ciphertext_scorer(store, t)
    k, clamped = _clamp_k(k, tree.n_leaves)
    if node_budget is None:
        budget = 2 * tree.n_leaves  # more nodes than the tree holds
    else:
        budget = max(node_budget, 2 * k + tree.depth)
    start = time.perf_counter()
    id_rank = store._id_rank
    match_scores = store.match_scores

    count = 0
    leaves_seen = 0
    # accepted top-k: min-heap keyed (query score, -id_rank) so ties evict
    # the lexicographically larger doc_id
    heap: List[Tuple[float, int, int]] = []

    def accepted_floor() -> float:
        return min(match_scores[row] for _, _, row in heap)

    def visit(node: TreeNode):
        nonlocal count, leaves_seen
        count += 1
        if node.is_leaf:
            leaves_seen += 1
            entry = (scorer(node.row), -int(id_rank[node.row]), node.row)
            if len(heap) < k:
                heapq.heappush(heap, entry)
            elif entry > heap[0]:
                heapq.heapreplace(heap, entry)
            return
        first, second = node.left, node.right
        if second.score_max > first.score_max:
            first, second = second, first
        for child in (first, second):
            if count >= budget and leaves_seen >= k:
                return
            if len(heap) == k and child.score_max < prune_margin * accepted_floor():
                continue
            visit(child)

    visit(tree.root)
    rows = np.array([row for _, _, row in heap], dtype=np.int64)
    scores = np.array([s for s, _, _ in heap])
    result = _top_k(scores, rows, store, k)
    elapsed = (time.perf_counter() - start) * 1e6
    stats = QueryStats(retrieved_index_count=count, precision=None,
                       elapsed_us=elapsed, clamped=clamped)
    return result, stats


def precision(result: ResultList, truth: ResultList) -> float:
    """Fraction of the true top-k recovered: |result ∩ truth| / k."""
    if result.k != truth.k:
        raise InvalidParameterError(
            f"precision needs matching k (got {result.k} and {truth.k})"
        )
    overlap = set(result.doc_ids) & set(truth.doc_ids)
    return len(overlap) / truth.k
