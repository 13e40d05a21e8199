"""Dictionary construction, TF-IDF weighting, padding, and synthetic corpora."""

from __future__ import annotations

import json
import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .aspe import PlainVector
from .errors import EmptyCorpusError, InvalidParameterError, UnknownKeywordError

_TOKEN_RE = re.compile(r"[a-z0-9']+")

# Deliberately tiny: enough to keep glue words out of real-text dictionaries
# without pretending to be a linguistics package.
STOPWORDS = frozenset(
    "a an and are as at be by for from has in is it of on or that the to was with".split()
)

PSEUDO_ZEROS = "zeros"
PSEUDO_RANDOM_SUBSET = "random-subset-one"


@dataclass(frozen=True)
class Document:
    doc_id: str
    tokens: tuple

    @classmethod
    def from_text(cls, doc_id: str, text: str) -> "Document":
        tokens = [t for t in _TOKEN_RE.findall(text.lower()) if t not in STOPWORDS]
        return cls(doc_id=doc_id, tokens=tuple(tokens))


@dataclass(frozen=True)
class CorpusStats:
    """Document frequencies and corpus size, fixed at dictionary-build time."""

    n_docs: int
    doc_freq: Dict[str, int]


@dataclass(frozen=True)
class Dictionary:
    """Ordered keyword list plus the pseudo-slot count.

    Vectors in this system have length V = N + U: one slot per real keyword
    followed by U pseudo slots used for score randomization.
    """

    keywords: tuple
    pseudo_slots: int
    keyword_pos: Dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if not self.keyword_pos:
            object.__setattr__(
                self, "keyword_pos", {kw: i for i, kw in enumerate(self.keywords)}
            )

    @property
    def n_keywords(self) -> int:
        return len(self.keywords)

    @property
    def dim(self) -> int:
        return len(self.keywords) + self.pseudo_slots

    def save(self, path) -> None:
        payload = {
            "n": self.n_keywords,
            "u": self.pseudo_slots,
            "keywords": list(self.keywords),
        }
        Path(path).write_text(json.dumps(payload, indent=0) + "\n")

    @classmethod
    def load(cls, path) -> "Dictionary":
        payload = json.loads(Path(path).read_text())
        return cls(keywords=tuple(payload["keywords"]), pseudo_slots=int(payload["u"]))


@dataclass(frozen=True)
class QuerySpec:
    """A multi-keyword query request; validate against a dictionary via create()."""

    keywords: tuple
    k: int

    def __post_init__(self):
        if not self.keywords:
            raise InvalidParameterError("query must contain at least one keyword")
        if self.k < 1:
            raise InvalidParameterError("query k must be >= 1")

    @classmethod
    def create(cls, keywords: Sequence[str], k: int, dictionary: Dictionary) -> "QuerySpec":
        unknown = [kw for kw in keywords if kw not in dictionary.keyword_pos]
        if unknown:
            raise UnknownKeywordError(f"keywords not in dictionary: {unknown}")
        return cls(keywords=tuple(keywords), k=k)


def corpus_stats(corpus: Sequence[Document]) -> CorpusStats:
    df: Counter = Counter()
    for doc in corpus:
        df.update(set(doc.tokens))
    return CorpusStats(n_docs=len(corpus), doc_freq=dict(df))


def build_dictionary(corpus: Sequence[Document], n_keywords: int,
                     pseudo_slots: int) -> Dictionary:
    """Keep the n most document-frequent tokens; ties go to the
    lexicographically smaller token."""
    if n_keywords < 1:
        raise InvalidParameterError("dictionary size must be >= 1")
    if pseudo_slots < 0:
        raise InvalidParameterError("pseudo slot count must be >= 0")
    if not corpus:
        raise EmptyCorpusError("cannot build a dictionary from zero documents")
    stats = corpus_stats(corpus)
    ranked = sorted(stats.doc_freq.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = tuple(kw for kw, _ in ranked[:n_keywords])
    return Dictionary(keywords=kept, pseudo_slots=pseudo_slots)


def tfidf_index(doc: Document, dictionary: Dictionary, stats: CorpusStats) -> PlainVector:
    """TF-IDF index vector: tf = count/len(doc), idf = ln(1 + D/df).

    Real-keyword slots are L2-normalized; pseudo slots stay zero until
    padding. Empty documents produce the zero vector.
    """
    values = np.zeros(dictionary.dim)
    n_tokens = len(doc.tokens)
    if n_tokens:
        counts = Counter(doc.tokens)
        for token, count in counts.items():
            pos = dictionary.keyword_pos.get(token)
            if pos is None:
                continue
            df = stats.doc_freq.get(token, 0)
            if df == 0:
                continue
            values[pos] = (count / n_tokens) * math.log(1.0 + stats.n_docs / df)
        norm = np.linalg.norm(values[: dictionary.n_keywords])
        if norm > 0:
            values[: dictionary.n_keywords] /= norm
    return PlainVector(values=values, role="index", doc_id=doc.doc_id)


def pad_pseudo(vector: PlainVector, dictionary: Dictionary, mean: float,
               sigma: float, seed: int) -> PlainVector:
    """Fill the pseudo slots with Normal(mean, sigma^2) draws.

    Real-keyword slots are returned bit-identical. With zero pseudo slots
    this is a no-op and warns, since padding was presumably expected.
    """
    if dictionary.pseudo_slots == 0:
        warnings.warn("dictionary has no pseudo slots; padding is a no-op")
        return vector
    rng = np.random.default_rng(seed)
    values = vector.values.copy()
    values[dictionary.n_keywords:] = rng.normal(mean, sigma, size=dictionary.pseudo_slots)
    return PlainVector(values=values, role=vector.role, doc_id=vector.doc_id)


def build_query(spec: QuerySpec, dictionary: Dictionary,
                pseudo_policy: str = PSEUDO_RANDOM_SUBSET, seed: int = 0,
                weights: Optional[Dict[str, float]] = None) -> PlainVector:
    """Query vector: 1.0 at each queried keyword slot (or a caller-supplied
    weight), pseudo slots per policy.

    Policy "zeros" leaves pseudo slots at zero; "random-subset-one" sets a
    seeded random subset of ceil(U/2) pseudo slots to 1 so that repeated
    identical queries produce different score profiles.
    """
    values = np.zeros(dictionary.dim)
    for kw in spec.keywords:
        pos = dictionary.keyword_pos.get(kw)
        if pos is None:
            raise UnknownKeywordError(f"keyword not in dictionary: {kw!r}")
        values[pos] = 1.0 if weights is None else float(weights.get(kw, 1.0))
    if pseudo_policy == PSEUDO_RANDOM_SUBSET and dictionary.pseudo_slots > 0:
        rng = np.random.default_rng(seed)
        subset = rng.choice(
            dictionary.pseudo_slots,
            size=(dictionary.pseudo_slots + 1) // 2,
            replace=False,
        )
        values[dictionary.n_keywords + subset] = 1.0
    elif pseudo_policy not in (PSEUDO_ZEROS, PSEUDO_RANDOM_SUBSET):
        raise InvalidParameterError(f"unknown pseudo policy {pseudo_policy!r}")
    return PlainVector(values=values, role="query")


def synth_corpus(n_docs: int, vocab: int, zipf_s: float, seed: int):
    """Seeded synthetic corpus: Zipf(zipf_s) token frequencies over `vocab`
    distinct words, document lengths uniform in [50, 500]."""
    if n_docs < 1 or vocab < 1:
        raise InvalidParameterError("corpus needs at least one document and one word")
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, vocab + 1, dtype=np.float64)
    probs = ranks ** (-zipf_s)
    probs /= probs.sum()
    width = len(str(vocab - 1))
    words = np.array([f"w{i:0{width}d}" for i in range(vocab)])
    id_width = max(4, len(str(n_docs - 1)))
    docs = []
    for i in range(n_docs):
        length = int(rng.integers(50, 501))
        tokens = words[rng.choice(vocab, size=length, p=probs)]
        docs.append(Document(doc_id=f"d{i:0{id_width}d}", tokens=tuple(tokens)))
    return docs


def load_corpus_dir(path) -> list:
    """One document per *.txt file; doc_id is the file stem."""
    root = Path(path)
    files = sorted(root.glob("*.txt"))
    if not files:
        raise EmptyCorpusError(f"no *.txt documents under {root}")
    return [Document.from_text(f.stem, f.read_text()) for f in files]


def load_corpus_manifest(path) -> list:
    """Line-delimited JSON manifest: {"doc_id": ..., "text": ...} per line."""
    docs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            docs.append(Document.from_text(rec["doc_id"], rec["text"]))
    if not docs:
        raise EmptyCorpusError(f"manifest {path} contains no documents")
    return docs
