"""Searchable encryption with exact ciphertext scoring, a learned index
ranking for sublinear top-k query, and cloud-side automatic weight updates."""

from .aspe import (
    CLOUD_RAW,
    OWNER_EXACT,
    EncryptedIncrement,
    EncryptedIndex,
    PlainVector,
    SecretKey,
    Trapdoor,
    apply_increment,
    encrypt_increment,
    encrypt_index,
    encrypt_indexes,
    extended_keygen,
    keygen,
    load_key,
    make_trapdoor,
    save_key,
    score,
    split_index,
    split_query,
)
from .corpus import (
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
from .errors import CipherseekError
from .feedback import (
    AdversaryState,
    FeedbackRecord,
    PopularityState,
    UpdateTarget,
    WunConfig,
    adversarial_value,
    san_observe,
    satlins,
    sgn,
    wun_async_step,
    wun_commit,
    wun_sync_step,
)
from .harness import (
    Agents,
    Counters,
    ScenarioConfig,
    bench_fig3,
    run_feedback_loop,
    run_query_round,
    run_setup,
)
from .kernels import BACKEND as KERNEL_BACKEND
from .queries import (
    IndexTree,
    QueryStats,
    ResultList,
    build_tree,
    precision,
    query_gdfs,
    query_lt,
    query_pr,
)
from .ranking import RankedStore, TrainConfig, gen_random_trapdoors, rerank, train_ranking

__version__ = "0.1.0"
