"""Three-party orchestration: owner, cloud, and user roles wired through the
serialized message boundary, with traffic accounting, the query-efficiency
benchmark grid, and the feedback/update loop."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as scipy_stats

from . import messages
from .aspe import (
    CLOUD_RAW,
    OWNER_EXACT,
    EncryptedIncrement,
    EncryptedIndex,
    PlainVector,
    SecretKey,
    Trapdoor,
    encrypt_increment,
    encrypt_indexes,
    keygen,
    make_trapdoor,
)
from .corpus import (
    PSEUDO_RANDOM_SUBSET,
    CorpusStats,
    Dictionary,
    Document,
    QuerySpec,
    build_dictionary,
    build_query,
    corpus_stats,
    pad_pseudo,
    synth_corpus,
    tfidf_index,
)
from .errors import CipherseekError, InvalidParameterError
from .feedback import (
    TRADITIONAL,
    AdversaryState,
    FeedbackRecord,
    PopularityState,
    WunConfig,
    adversarial_value,
    equilibrium_discriminator,
    san_observe,
    wun_async_step,
    wun_commit,
    wun_sync_step,
)
from .queries import (
    LT_CI,
    PO_TREE_CI,
    PO_TREE_PI,
    PR_CI,
    RU_TREE_PI,
    STRATEGIES,
    IndexTree,
    QueryStats,
    ResultList,
    build_tree,
    gdfs_budget,
    plaintext_scorer,
    precision,
    query_gdfs,
    query_lt,
    query_pr,
)
from .ranking import RankedStore, TrainConfig, iter_random_trapdoor_batches

FIG_K_VALUES = (1, 2, 4, 5, 8, 10, 16, 20, 25, 40, 50, 80, 100, 200)

CSV_FIELDS = ("strategy", "D", "N_dict", "k", "beta", "retrieved_index_count",
              "precision", "elapsed_microseconds", "seed")


@dataclass
class Counters:
    """Monotone traffic and activity accounting."""

    bytes_up: int = 0
    bytes_down: int = 0
    bytes_down_index: int = 0
    trapdoors_sent: int = 0
    queries_run: int = 0

    def snapshot(self) -> Dict[str, int]:
        return asdict(self)


@dataclass
class ScenarioConfig:
    """Everything a reproducible scenario needs, including every seed."""

    # corpus
    n_docs: int = 400
    n_keywords: int = 2000
    pseudo_slots: int = 100
    vocab: int = 2500
    zipf_s: float = 1.1
    corpus_seed: int = 11
    # key and padding
    key_seed: int = 7
    pad_mean: float = 0.0
    pad_sigma: float = 0.01
    pad_seed: int = 13
    encrypt_seed: int = 19
    # ranking
    train_m: Optional[int] = None  # None -> 50 * n_docs
    train_sigma: float = 1.0
    train_distribution: str = "nonneg-uniform"
    train_sparsity: float = 0.005
    train_seed: int = 17
    # query construction
    pseudo_policy: str = PSEUDO_RANDOM_SUBSET
    query_density: float = 0.15
    # benchmark grid
    strategies: Tuple[str, ...] = STRATEGIES
    k_values: Tuple[int, ...] = FIG_K_VALUES
    repetitions: int = 100
    beta: float = 1.0
    prune_margin: float = 0.0
    tree_budget_scale: float = 2.5
    bench_seed: int = 23
    ru_tree_seed: int = 31
    timing: bool = False
    # feedback loop
    feedback_rounds: int = 500
    feedback_k: int = 16
    feedback_keywords: int = 3
    feedback_zipf_s: float = 1.2
    feedback_seed: int = 29
    update_channel: str = CLOUD_RAW
    pop_decay: float = 1.0
    pop_eta: float = 1.0
    wun_mode: str = "async"
    wun_activation: str = "satlins"
    wun_eta: float = 0.1
    wun_max_sweeps: int = 100
    wun_stability_tol: float = 1e-4

    def __post_init__(self):
        for k in self.k_values:
            if k > self.n_docs:
                raise InvalidParameterError(
                    f"k={k} exceeds the corpus size {self.n_docs}"
                )
        for strategy in self.strategies:
            if strategy not in STRATEGIES:
                raise InvalidParameterError(f"unknown strategy {strategy!r}")

    @property
    def dim(self) -> int:
        return self.n_keywords + self.pseudo_slots

    def train_config(self) -> TrainConfig:
        m = self.train_m if self.train_m is not None else 50 * self.n_docs
        return TrainConfig(m=m, sigma=self.train_sigma,
                           distribution=self.train_distribution,
                           sparsity=self.train_sparsity, seed=self.train_seed)

    def wun_config(self) -> WunConfig:
        return WunConfig(mode=self.wun_mode, activation=self.wun_activation,
                         eta=self.wun_eta, max_sweeps=self.wun_max_sweeps,
                         stability_tol=self.wun_stability_tol)

    def to_file(self, path) -> None:
        payload = asdict(self)
        payload["strategies"] = list(self.strategies)
        payload["k_values"] = list(self.k_values)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        payload = json.loads(Path(path).read_text())
        if "strategies" in payload:
            payload["strategies"] = tuple(payload["strategies"])
        if "k_values" in payload:
            payload["k_values"] = tuple(payload["k_values"])
        return cls(**payload)


def _zipf_probs(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    probs = ranks ** (-s)
    return probs / probs.sum()


class OwnerAgent:
    """Holds the dictionary, the key, and the plaintext corpus. Nothing in
    its public surface ever hands out key material or plaintext vectors;
    everything it ships is already encrypted and serialized."""

    def __init__(self, cfg: ScenarioConfig, corpus: Optional[List[Document]] = None):
        self.cfg = cfg
        self.corpus = corpus if corpus is not None else synth_corpus(
            cfg.n_docs, cfg.vocab, cfg.zipf_s, cfg.corpus_seed
        )
        self.stats = corpus_stats(self.corpus)
        self.dictionary = build_dictionary(self.corpus, cfg.n_keywords,
                                           cfg.pseudo_slots)
        self.key = keygen(self.dictionary.dim, cfg.key_seed)
        self._plain_vectors: List[PlainVector] = []
        for i, doc in enumerate(self.corpus):
            vec = tfidf_index(doc, self.dictionary, self.stats)
            if cfg.pseudo_slots > 0:
                vec = pad_pseudo(vec, self.dictionary, cfg.pad_mean,
                                 cfg.pad_sigma, seed=self._seed("pad", i))
            self._plain_vectors.append(vec)
        self.doc_ids = [doc.doc_id for doc in self.corpus]
        self._row_of_doc = {d: i for i, d in enumerate(self.doc_ids)}
        self.plain_matrix = np.ascontiguousarray(
            np.stack([v.values for v in self._plain_vectors])
        )
        # popularity proxy used by the workload samplers: documents ordered
        # by real-keyword weight mass, heaviest first
        mass = self.plain_matrix[:, : self.dictionary.n_keywords].sum(axis=1)
        self.mass_order = [self.doc_ids[i]
                           for i in np.lexsort((np.array(self.doc_ids), -mass))]
        self._top_terms_cache = {}

    def _seed(self, label: str, *indices: int) -> list:
        base = {"pad": 101, "enc": 211, "query": 307, "inc": 401, "renc": 503}[label]
        return [self.cfg.corpus_seed & 0xFFFFFFFF, base, *[i & 0xFFFFFFFF for i in indices]]

    # ---- setup-time shipping ----

    def ship_indexes(self) -> bytes:
        doc_ids, c1, c2 = encrypt_indexes(self._plain_vectors, self.key,
                                          seed=self.cfg.encrypt_seed)
        return messages.IndexBatchMsg(doc_ids=tuple(doc_ids), c1=c1, c2=c2).pack()

    def training_batches(self) -> Iterator[bytes]:
        for t1, t2 in iter_random_trapdoor_batches(self.cfg.train_config(), self.key):
            yield messages.TrapdoorBatchMsg(t1=t1, t2=t2).pack()

    # ---- query service ----

    def trapdoor_for(self, spec: QuerySpec, seed_index: int) -> Trapdoor:
        query = build_query(spec, self.dictionary,
                            pseudo_policy=self.cfg.pseudo_policy,
                            seed=self._seed("query", seed_index, 1))
        return make_trapdoor(query, spec.k, self.key,
                             seed=self._seed("query", seed_index, 2))

    def plain_query_vector(self, spec: QuerySpec, seed_index: int) -> np.ndarray:
        """The same query vector the trapdoor encrypts; for plaintext baselines."""
        return build_query(spec, self.dictionary,
                           pseudo_policy=self.cfg.pseudo_policy,
                           seed=self._seed("query", seed_index, 1)).values

    # ---- update channels ----

    def encrypt_score_deltas(self, deltas: Dict[str, float]):
        """Owner-exact channel: per-document plaintext deltas along each
        document's own weight direction, encrypted under the key."""
        increments: Dict[str, EncryptedIncrement] = {}
        upload = 0
        for doc_id in sorted(deltas):
            row = self._row_of_doc[doc_id]
            direction = self.plain_matrix[row]
            norm = float(np.linalg.norm(direction))
            if norm < 1e-12:
                continue
            delta_vec = (deltas[doc_id] / norm) * direction
            inc = encrypt_increment(delta_vec, self.key,
                                    seed=self._seed("inc", row))
            upload += len(messages.EncIncrementMsg(doc_id=doc_id,
                                                   d1=inc.d1, d2=inc.d2).pack())
            increments[doc_id] = inc
        return increments, upload

    def reencrypt_with_delta(self, old: EncryptedIndex, doc_id: str, delta: float):
        """Traditional baseline: decrypt-side update and full re-encryption."""
        row = self._row_of_doc[doc_id]
        direction = self.plain_matrix[row]
        norm = float(np.linalg.norm(direction))
        if norm > 1e-12:
            self.plain_matrix[row] = direction + (delta / norm) * direction
        _, c1, c2 = encrypt_indexes(
            [PlainVector(values=self.plain_matrix[row], role="index", doc_id=doc_id)],
            self.key, seed=self._seed("renc", row),
        )
        new = EncryptedIndex(c1=c1[0], c2=c2[0], doc_id=doc_id)
        upload = len(messages.IndexReplaceMsg(doc_id=doc_id, c1=new.c1, c2=new.c2).pack())
        return new, upload

    # ---- workload sampling (simulation driver, not protocol traffic) ----

    def sample_query_spec(self, rng: np.random.Generator, k: int,
                          density: float) -> QuerySpec:
        """Random benchmark query: each dictionary keyword is requested
        independently with the given probability, mirroring the law the
        ranking was trained under."""
        mask = rng.random(self.dictionary.n_keywords) < density
        if not mask.any():
            mask[int(rng.integers(self.dictionary.n_keywords))] = True
        keywords = [kw for kw, hit in zip(self.dictionary.keywords, mask) if hit]
        return QuerySpec.create(keywords, k, self.dictionary)

    def sample_doc_query_spec(self, rng: np.random.Generator, k: int,
                              zipf_s: float, n_keywords: int) -> QuerySpec:
        """Feedback-workload query: pick a target document with Zipf
        interest over the mass ranking and ask for its most distinctive
        terms, the way a user hunts for one specific document."""
        probs = _zipf_probs(len(self.mass_order), zipf_s)
        target = self.mass_order[int(rng.choice(len(self.mass_order), p=probs))]
        return QuerySpec.create(self._top_terms(target, n_keywords), k,
                                self.dictionary)

    def _top_terms(self, doc_id: str, count: int):
        cached = self._top_terms_cache.get(doc_id)
        if cached is None or len(cached) < count:
            row = self.plain_matrix[self._row_of_doc[doc_id],
                                    : self.dictionary.n_keywords]
            order = np.lexsort((np.arange(row.shape[0]), -row))
            cached = [self.dictionary.keywords[i] for i in order[: max(count, 8)]
                      if row[i] > 0]
            if not cached:
                cached = [self.dictionary.keywords[0]]
            self._top_terms_cache[doc_id] = cached
        return cached[:count]


class CloudAgent:
    """Holds only what arrived through messages: ciphertexts, trapdoors,
    scores, ranks, and the popularity state derived from results."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.store: Optional[RankedStore] = None
        self.po_tree: Optional[IndexTree] = None
        self.pop = PopularityState(decay=cfg.pop_decay, eta=cfg.pop_eta)
        self.audit_log: List[Dict] = []
        self._index_msg: Optional[messages.IndexBatchMsg] = None
        self._train_s1: Optional[np.ndarray] = None
        self._train_s2: Optional[np.ndarray] = None
        self._train_count = 0

    # ---- inbound message handling ----

    def receive_indexes(self, blob: bytes) -> None:
        self._index_msg = messages.IndexBatchMsg.unpack(blob)

    def receive_training_batch(self, blob: bytes) -> None:
        msg = messages.TrapdoorBatchMsg.unpack(blob)
        if self._train_s1 is None:
            self._train_s1 = np.zeros(msg.t1.shape[1])
            self._train_s2 = np.zeros(msg.t2.shape[1])
        self._train_s1 += msg.t1.sum(axis=0)
        self._train_s2 += msg.t2.sum(axis=0)
        self._train_count += msg.t1.shape[0]

    def finalize_training(self) -> None:
        if self._index_msg is None or self._train_s1 is None:
            raise CipherseekError("cloud needs indexes and training batches first")
        from .kernels import paired_gemv

        msg = self._index_msg
        match = np.empty(len(msg.doc_ids))
        paired_gemv(msg.c1, msg.c2, self._train_s1, self._train_s2, match)
        self.store = RankedStore(list(msg.doc_ids), msg.c1, msg.c2, match,
                                 train_config=self.cfg.train_config())
        self.po_tree = build_tree(self.store, leaf_order="probabilistic")

    def _require_store(self) -> RankedStore:
        if self.store is None:
            raise CipherseekError("cloud store is not initialized")
        return self.store

    def handle_query(self, blob: bytes) -> Tuple[bytes, QueryStats]:
        msg = messages.QueryMsg.unpack(blob)
        store = self._require_store()
        trapdoor = Trapdoor(t1=msg.t1, t2=msg.t2, k=msg.k)
        if msg.strategy == LT_CI:
            result, stats = query_lt(store, trapdoor, msg.k)
        elif msg.strategy == PR_CI:
            result, stats = query_pr(store, trapdoor, msg.k, beta=msg.beta)
        elif msg.strategy == PO_TREE_CI:
            if self.po_tree is None or self.po_tree.store is not store:
                self.po_tree = build_tree(store, leaf_order="probabilistic")
            budget = gdfs_budget(len(store), msg.k, self.cfg.tree_budget_scale,
                                 self.po_tree.depth)
            result, stats = query_gdfs(self.po_tree, trapdoor, msg.k,
                                       prune_margin=msg.prune_margin,
                                       node_budget=budget)
        else:
            raise InvalidParameterError(
                f"cloud cannot execute strategy {msg.strategy!r}"
            )
        reply = messages.ResultsMsg(
            doc_ids=result.doc_ids,
            scores=np.array([s for _, s in result.hits]),
            retrieved_index_count=stats.retrieved_index_count,
        ).pack()
        return reply, stats

    # ---- feedback-side state ----

    def observe_feedback(self, fb: FeedbackRecord):
        return san_observe(self._require_store(), fb, self.pop)

    def set_store(self, store: RankedStore) -> None:
        self.store = store
        # cached trees refer to the old store; invalidate lazily
        self.po_tree = None

    def popularity_permutation(self) -> Dict[str, int]:
        """Ranks over all stored docs: hit counts descending, ties by doc_id;
        never-returned docs count as zero."""
        store = self._require_store()
        counts = {d: self.pop.hit_counts.get(d, 0.0) for d in store.doc_ids}
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return {doc_id: rank for rank, (doc_id, _) in enumerate(ordered)}

    def popularity_ranks_tied(self) -> Dict[str, int]:
        """As popularity_permutation, but documents with equal hit counts
        share a rank (competition ranking)."""
        store = self._require_store()
        counts = {d: self.pop.hit_counts.get(d, 0.0) for d in store.doc_ids}
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        ranks: Dict[str, int] = {}
        last_count = None
        last_rank = 0
        for i, (doc_id, count) in enumerate(ordered):
            if count != last_count:
                last_rank = i
                last_count = count
            ranks[doc_id] = last_rank
        return ranks


@dataclass
class Agents:
    owner: OwnerAgent
    cloud: CloudAgent
    counters: Counters


def run_setup(cfg: ScenarioConfig,
              corpus: Optional[List[Document]] = None) -> Agents:
    """Owner builds and ships everything; cloud trains its ranking."""
    owner = OwnerAgent(cfg, corpus=corpus)
    cloud = CloudAgent(cfg)
    counters = Counters()
    blob = owner.ship_indexes()
    counters.bytes_up += len(blob)
    cloud.receive_indexes(blob)
    for batch in owner.training_batches():
        counters.bytes_up += len(batch)
        counters.trapdoors_sent += messages.TrapdoorBatchMsg.unpack(batch).t1.shape[0]
        cloud.receive_training_batch(batch)
    cloud.finalize_training()
    return Agents(owner=owner, cloud=cloud, counters=counters)


def _pi_trees(agents: Agents) -> Dict[str, IndexTree]:
    """Plaintext-baseline trees over the same store metadata."""
    store = agents.cloud._require_store()
    return {
        PO_TREE_PI: build_tree(store, leaf_order="probabilistic"),
        RU_TREE_PI: build_tree(store, leaf_order="random",
                               seed=agents.owner.cfg.ru_tree_seed),
    }


def _plain_rows(agents: Agents) -> np.ndarray:
    """Owner plaintext matrix aligned with store rows (baseline-only path)."""
    store = agents.cloud._require_store()
    owner = agents.owner
    rows = [owner._row_of_doc[d] for d in store.doc_ids]
    return owner.plain_matrix[rows]


def run_query_round(agents: Agents, spec: QuerySpec, strategy: str,
                    seed_index: int = 0,
                    pi_trees: Optional[Dict[str, IndexTree]] = None,
                    ) -> Tuple[ResultList, QueryStats]:
    """One user query end to end, with ground-truth precision attached."""
    owner, cloud, counters = agents.owner, agents.cloud, agents.counters
    trapdoor = owner.trapdoor_for(spec, seed_index)
    store = cloud._require_store()

    if strategy in (PO_TREE_PI, RU_TREE_PI):
        trees = pi_trees if pi_trees is not None else _pi_trees(agents)
        plain = _plain_rows(agents)
        query_vec = owner.plain_query_vector(spec, seed_index)
        scorer = plaintext_scorer(store, plain, query_vec)
        budget = gdfs_budget(len(store), spec.k, owner.cfg.tree_budget_scale,
                             trees[strategy].depth)
        result, stats = query_gdfs(trees[strategy], None, spec.k,
                                   prune_margin=owner.cfg.prune_margin,
                                   scorer=scorer, node_budget=budget)
    else:
        blob = messages.QueryMsg(
            t1=trapdoor.t1, t2=trapdoor.t2, k=spec.k, strategy=strategy,
            beta=owner.cfg.beta, prune_margin=owner.cfg.prune_margin,
        ).pack()
        counters.bytes_up += len(blob)
        counters.trapdoors_sent += 1
        reply, stats = cloud.handle_query(blob)
        counters.bytes_down += len(reply)
        msg = messages.ResultsMsg.unpack(reply)
        result = ResultList(
            hits=tuple(zip(msg.doc_ids, (float(s) for s in msg.scores))),
            k=spec.k,
        )
    counters.queries_run += 1

    if strategy != LT_CI:
        truth, _ = query_lt(store, trapdoor, spec.k)
        stats.precision = precision(result, truth)
    return result, stats


# ---------------------------------------------------------------------------
# benchmark grid
# ---------------------------------------------------------------------------


def bench_fig3(cfg: ScenarioConfig, out_path=None,
               agents: Optional[Agents] = None) -> List[Dict]:
    """Averaged precision and retrieval counts for every strategy and k.

    One row per (strategy, k); each cell averages the configured number of
    seeded queries, and the same query set is shared across strategies and
    k values so the comparisons are paired. The CSV is byte-deterministic
    for a fixed config; wall-clock timing is only recorded when cfg.timing
    is set, since measured times would break reproducibility.
    """
    if agents is None:
        agents = run_setup(cfg)
    owner, cloud, counters = agents.owner, agents.cloud, agents.counters
    store = cloud._require_store()
    pi_trees = _pi_trees(agents)
    plain = _plain_rows(agents)

    max_k = max(cfg.k_values)
    reps = cfg.repetitions
    rng = np.random.default_rng([cfg.bench_seed & 0xFFFFFFFF, 0x5EED])
    specs = [owner.sample_query_spec(rng, max_k, cfg.query_density)
             for _ in range(reps)]
    trapdoors = [owner.trapdoor_for(spec, seed_index=i)
                 for i, spec in enumerate(specs)]
    plain_queries = [owner.plain_query_vector(spec, seed_index=i)
                     for i, spec in enumerate(specs)]
    truths = {}  # (rep, k) -> ResultList

    def truth_for(rep: int, k: int) -> ResultList:
        key = (rep, k)
        if key not in truths:
            truths[key], _ = query_lt(store, trapdoors[rep], k)
        return truths[key]

    rows: List[Dict] = []
    for strategy in cfg.strategies:
        for k in cfg.k_values:
            counts = np.empty(reps)
            precisions = np.empty(reps)
            elapsed = np.empty(reps)
            for rep in range(reps):
                trapdoor = trapdoors[rep]
                if strategy in (PO_TREE_PI, RU_TREE_PI):
                    scorer = plaintext_scorer(store, plain, plain_queries[rep])
                    budget = gdfs_budget(len(store), k, cfg.tree_budget_scale,
                                         pi_trees[strategy].depth)
                    result, stats = query_gdfs(pi_trees[strategy], None, k,
                                               prune_margin=cfg.prune_margin,
                                               scorer=scorer, node_budget=budget)
                else:
                    blob = messages.QueryMsg(
                        t1=trapdoor.t1, t2=trapdoor.t2, k=k, strategy=strategy,
                        beta=cfg.beta, prune_margin=cfg.prune_margin,
                    ).pack()
                    counters.bytes_up += len(blob)
                    counters.trapdoors_sent += 1
                    reply, stats = cloud.handle_query(blob)
                    counters.bytes_down += len(reply)
                    msg = messages.ResultsMsg.unpack(reply)
                    result = ResultList(
                        hits=tuple(zip(msg.doc_ids,
                                       (float(s) for s in msg.scores))),
                        k=k,
                    )
                counters.queries_run += 1
                counts[rep] = stats.retrieved_index_count
                precisions[rep] = (1.0 if strategy == LT_CI
                                   else precision(result, truth_for(rep, k)))
                elapsed[rep] = stats.elapsed_us
            rows.append({
                "strategy": strategy,
                "D": cfg.n_docs,
                "N_dict": owner.dictionary.n_keywords,
                "k": k,
                "beta": cfg.beta,
                "retrieved_index_count": float(counts.mean()),
                "precision": float(precisions.mean()),
                "elapsed_microseconds": float(elapsed.mean()) if cfg.timing else "",
                "seed": cfg.bench_seed,
            })
    if out_path is not None:
        write_bench_csv(rows, out_path)
    return rows


def write_bench_csv(rows: Sequence[Dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_cell(row[k]) for k in CSV_FIELDS})


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_bench_csv(path) -> List[Dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# feedback / update loop
# ---------------------------------------------------------------------------


@dataclass
class LoopReport:
    """Outcome of a feedback/update run."""

    rounds: int
    final_tau: float
    tau_trajectory: List[Tuple[int, float]]
    adversarial_values: List[Tuple[int, float]]
    counters: Dict[str, int]
    update_channel: str
    sync_stabilized: Optional[bool] = None
    max_sync_sweeps: int = 0


def rank_kendall_tau(store_ranks: Dict[str, int],
                     popularity_ranks: Dict[str, int]) -> float:
    """Tie-aware (tau-b) rank correlation. Popularity ties, in particular
    the block of never-returned documents, stay tied rather than being
    forced into an arbitrary order."""
    docs = sorted(store_ranks)
    x = [store_ranks[d] for d in docs]
    y = [popularity_ranks[d] for d in docs]
    if len(docs) < 2:
        return 1.0
    tau = scipy_stats.kendalltau(x, y).statistic
    return float(tau) if np.isfinite(tau) else 0.0


def _rank_bucket_distributions(store: RankedStore, pop: PopularityState,
                               buckets: int = 10):
    """p_i: uniform over rank buckets; p_q: observed hits by current rank."""
    n = len(store)
    buckets = min(buckets, n)
    p_i = np.full(buckets, 1.0 / buckets)
    weights = np.zeros(buckets)
    ranks = store.ranks()
    for doc_id, count in pop.hit_counts.items():
        b = min(int(ranks[doc_id] * buckets / n), buckets - 1)
        weights[b] += count
    total = weights.sum()
    p_q = weights / total if total > 0 else np.full(buckets, 1.0 / buckets)
    return p_i, p_q


def run_feedback_loop(agents: Agents, rounds: Optional[int] = None,
                      update_channel: Optional[str] = None,
                      tau_every: int = 50,
                      feedback_log_path=None,
                      audit_log_path=None) -> LoopReport:
    """The query -> observe -> update -> commit loop.

    Each round samples a Zipf-popular target document, runs an exact
    linear-traversal query for it, folds the ranked results into the
    popularity state, applies the configured update steps to the learned
    ranking, and commits ciphertext increments through the configured
    channel. Kendall tau between the learned ranking and the popularity
    ranking is tracked as the convergence measure.
    """
    owner, cloud, counters = agents.owner, agents.cloud, agents.counters
    cfg = owner.cfg
    rounds = cfg.feedback_rounds if rounds is None else rounds
    channel = update_channel or cfg.update_channel
    wun_cfg = cfg.wun_config()
    rng = np.random.default_rng([cfg.feedback_seed & 0xFFFFFFFF, 0xFEED])

    tau_trajectory: List[Tuple[int, float]] = []
    adv_values: List[Tuple[int, float]] = []
    sync_stabilized: Optional[bool] = None
    max_sweeps_seen = 0
    fb_log = open(feedback_log_path, "a") if feedback_log_path else None
    audit_log = open(audit_log_path, "a") if audit_log_path else None

    for round_no in range(rounds):
        spec = owner.sample_doc_query_spec(rng, cfg.feedback_k,
                                           cfg.feedback_zipf_s,
                                           cfg.feedback_keywords)
        store = cloud._require_store()
        trapdoor = owner.trapdoor_for(spec, seed_index=10_000 + round_no)
        blob = messages.QueryMsg(t1=trapdoor.t1, t2=trapdoor.t2, k=spec.k,
                                 strategy=LT_CI, beta=cfg.beta,
                                 prune_margin=cfg.prune_margin).pack()
        counters.bytes_up += len(blob)
        counters.trapdoors_sent += 1
        reply, _ = cloud.handle_query(blob)
        counters.bytes_down += len(reply)
        counters.queries_run += 1
        msg = messages.ResultsMsg.unpack(reply)
        result = ResultList(
            hits=tuple(zip(msg.doc_ids, (float(s) for s in msg.scores))),
            k=spec.k,
        )

        fb = FeedbackRecord(round=round_no, result=result,
                            store_ranks_at_query=store.ranks(),
                            store_version=store.version)
        if fb_log is not None:
            fb_log.write(json.dumps({
                "round": round_no,
                "doc_ids": list(result.doc_ids),
                "scores": [s for _, s in result.hits],
                "store_version": store.version,
            }) + "\n")
        target = cloud.observe_feedback(fb)
        if target.residuals:
            store = cloud._require_store()
            if wun_cfg.mode == "async":
                for doc_id in sorted(target.residuals):
                    store = wun_async_step(store, target, doc_id, wun_cfg)
            else:
                store, stabilized, sweeps = wun_sync_step(store, target, wun_cfg)
                sync_stabilized = (stabilized if sync_stabilized is None
                                   else sync_stabilized and stabilized)
                max_sweeps_seen = max(max_sweeps_seen, sweeps)
            store = wun_commit(store, target, channel, counters, wun_cfg,
                               owner=owner if channel in (OWNER_EXACT, TRADITIONAL)
                               else None)
            cloud.set_store(store)
            entry = {
                "round": round_no,
                "mode": channel,
                "docs": len(target.residuals),
                "bytes_up": counters.bytes_up,
                "bytes_down": counters.bytes_down,
                "bytes_down_index": counters.bytes_down_index,
            }
            cloud.audit_log.append(entry)
            if audit_log is not None:
                audit_log.write(json.dumps(entry) + "\n")

        if (round_no + 1) % tau_every == 0 or round_no == rounds - 1:
            tau = rank_kendall_tau(cloud._require_store().ranks(),
                                   cloud.popularity_ranks_tied())
            tau_trajectory.append((round_no + 1, tau))
            p_i, p_q = _rank_bucket_distributions(cloud._require_store(), cloud.pop)
            adv = AdversaryState(
                discriminator=equilibrium_discriminator(p_i, p_q),
                index_dist=p_i, query_dist=p_q,
            )
            adv_values.append((round_no + 1, adversarial_value(adv)))

    if fb_log is not None:
        fb_log.close()
    if audit_log is not None:
        audit_log.close()
    if channel == CLOUD_RAW and counters.bytes_down_index != 0:
        raise CipherseekError(
            "cloud-raw updates must never download indexes, but "
            f"bytes_down_index={counters.bytes_down_index}"
        )

    final_tau = (tau_trajectory[-1][1] if tau_trajectory
                 else rank_kendall_tau(cloud._require_store().ranks(),
                                       cloud.popularity_ranks_tied()))
    return LoopReport(
        rounds=rounds,
        final_tau=final_tau,
        tau_trajectory=tau_trajectory,
        adversarial_values=adv_values,
        counters=counters.snapshot(),
        update_channel=channel,
        sync_stabilized=sync_stabilized,
        max_sync_sweeps=max_sweeps_seen,
    )
