"""Command-line entry point for the full pipeline.

Commands: keygen, ingest, encrypt, train-rank, query, feedback-loop,
update, bench, report. Every command is deterministic given its --seed.
Usage errors exit with 2, data errors with 1 and a single machine-parsable
line on stderr. CIPHERSEEK_SEED and CIPHERSEEK_OUT_DIR provide environment
defaults for --seed and relative output paths.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import aspe, corpus, feedback, harness, messages, queries, ranking
from .errors import CipherseekError


def _out_path(path: str) -> Path:
    base = os.environ.get("CIPHERSEEK_OUT_DIR")
    p = Path(path)
    if base and not p.is_absolute():
        return Path(base) / p
    return p


def _env_seed(value):
    if value is not None:
        return value
    env = os.environ.get("CIPHERSEEK_SEED")
    return int(env) if env else 0


def _load_scenario(args) -> harness.ScenarioConfig:
    if getattr(args, "config", None):
        return harness.ScenarioConfig.from_file(args.config)
    return harness.ScenarioConfig()


def _load_corpus(args):
    if args.corpus_dir:
        return corpus.load_corpus_dir(args.corpus_dir)
    if args.manifest:
        return corpus.load_corpus_manifest(args.manifest)
    cfg = _load_scenario(args)
    return corpus.synth_corpus(cfg.n_docs, cfg.vocab, cfg.zipf_s, cfg.corpus_seed)


def _add_corpus_args(p):
    p.add_argument("--corpus-dir", help="directory of *.txt documents")
    p.add_argument("--manifest", help="line-delimited JSON corpus manifest")
    p.add_argument("--config", help="scenario config for a synthetic corpus")


def cmd_keygen(args) -> int:
    sk = aspe.keygen(args.dim, _env_seed(args.seed))
    aspe.save_key(sk, _out_path(args.out))
    print(f"wrote key: dim={sk.dim} seed={sk.seed} -> {args.out}")
    return 0


def cmd_ingest(args) -> int:
    docs = _load_corpus(args)
    dictionary = corpus.build_dictionary(docs, args.n_keywords, args.pseudo_slots)
    dictionary.save(_out_path(args.out))
    if args.stats_out:
        stats = corpus.corpus_stats(docs)
        payload = {"n_docs": stats.n_docs, "doc_freq": stats.doc_freq}
        _out_path(args.stats_out).write_text(json.dumps(payload, sort_keys=True))
    print(f"dictionary: {dictionary.n_keywords} keywords, "
          f"{dictionary.pseudo_slots} pseudo slots, dim={dictionary.dim}")
    return 0


def cmd_encrypt(args) -> int:
    docs = _load_corpus(args)
    dictionary = corpus.Dictionary.load(args.dict)
    if args.stats:
        payload = json.loads(Path(args.stats).read_text())
        stats = corpus.CorpusStats(n_docs=payload["n_docs"],
                                   doc_freq=payload["doc_freq"])
    else:
        stats = corpus.corpus_stats(docs)
    sk = aspe.load_key(args.key)
    seed = _env_seed(args.seed)
    vectors = []
    for i, doc in enumerate(docs):
        vec = corpus.tfidf_index(doc, dictionary, stats)
        if dictionary.pseudo_slots > 0:
            vec = corpus.pad_pseudo(vec, dictionary, args.pad_mean,
                                    args.pad_sigma, seed=[seed, 101, i])
        vectors.append(vec)
    doc_ids, c1, c2 = aspe.encrypt_indexes(vectors, sk, seed=[seed, 211])
    store = ranking.RankedStore(doc_ids, c1, c2, np.zeros(len(doc_ids)))
    store.save(_out_path(args.out))
    print(f"encrypted {len(doc_ids)} indexes at dim={sk.dim} -> {args.out}")
    return 0


def cmd_train_rank(args) -> int:
    store = ranking.RankedStore.load(args.indexes)
    sk = aspe.load_key(args.key)
    m = args.m if args.m is not None else 50 * len(store)
    cfg = ranking.TrainConfig(m=m, sigma=args.sigma, distribution=args.distribution,
                              sparsity=args.sparsity, seed=_env_seed(args.seed))
    indexes = [e.index for e in store.entries]
    trained = ranking.train_ranking(indexes,
                                    ranking.iter_random_trapdoor_batches(cfg, sk),
                                    train_config=cfg)
    trained.save(_out_path(args.out))
    print(f"trained ranking over {len(trained)} indexes with m={cfg.m} -> {args.out}")
    return 0


def cmd_query(args) -> int:
    store = ranking.RankedStore.load(args.store)
    sk = aspe.load_key(args.key)
    dictionary = corpus.Dictionary.load(args.dict)
    keywords = [w.strip() for w in args.keywords.split(",") if w.strip()]
    spec = corpus.QuerySpec.create(keywords, args.k, dictionary)
    seed = _env_seed(args.seed)
    query_vec = corpus.build_query(spec, dictionary, pseudo_policy=args.pseudo_policy,
                                   seed=[seed, 307])
    trapdoor = aspe.make_trapdoor(query_vec, spec.k, sk, seed=[seed, 308])
    if args.strategy == queries.LT_CI:
        result, stats = queries.query_lt(store, trapdoor, spec.k)
    elif args.strategy == queries.PR_CI:
        result, stats = queries.query_pr(store, trapdoor, spec.k, beta=args.beta)
    elif args.strategy == queries.PO_TREE_CI:
        tree = queries.build_tree(store, leaf_order="probabilistic")
        result, stats = queries.query_gdfs(tree, trapdoor, spec.k,
                                           prune_margin=args.prune_margin)
    else:
        raise CipherseekError(f"strategy {args.strategy!r} needs plaintext access; "
                              "use lt-ci, pr-ci, or po-tree-ci")
    truth, _ = queries.query_lt(store, trapdoor, spec.k)
    prec = queries.precision(result, truth)
    for doc_id, s in result.hits:
        print(f"{doc_id}\t{s:.6f}")
    print(f"# retrieved_index_count={stats.retrieved_index_count} precision={prec}")
    if args.out:
        with open(_out_path(args.out), "w") as fh:
            fh.write("doc_id,score\n")
            for doc_id, s in result.hits:
                fh.write(f"{doc_id},{s!r}\n")
    return 0


def cmd_feedback_loop(args) -> int:
    cfg = _load_scenario(args)
    if args.rounds is not None:
        cfg = dataclasses.replace(cfg, feedback_rounds=args.rounds)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, feedback_seed=args.seed)
    agents = harness.run_setup(cfg)
    report = harness.run_feedback_loop(
        agents,
        update_channel=args.channel or cfg.update_channel,
        feedback_log_path=_out_path(args.feedback_log) if args.feedback_log else None,
        audit_log_path=_out_path(args.audit_log) if args.audit_log else None,
    )
    payload = {
        "rounds": report.rounds,
        "final_tau": report.final_tau,
        "tau_trajectory": report.tau_trajectory,
        "adversarial_values": report.adversarial_values,
        "counters": report.counters,
        "update_channel": report.update_channel,
    }
    if args.out:
        _out_path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    print(f"feedback loop: rounds={report.rounds} final_tau={report.final_tau:.4f} "
          f"bytes_down_index={report.counters['bytes_down_index']}")
    return 0


def cmd_update(args) -> int:
    store = ranking.RankedStore.load(args.store)
    if args.mode == aspe.OWNER_EXACT:
        if not args.key or not args.delta_file:
            raise CipherseekError("owner-exact update needs --key and --delta-file")
        sk = aspe.load_key(args.key)
        delta = np.asarray(json.loads(Path(args.delta_file).read_text()),
                           dtype=np.float64)
        inc = aspe.encrypt_increment(delta, sk, seed=_env_seed(args.seed))
        new_store = feedback.apply_store_increments(
            store, {args.doc_id: inc}, aspe.OWNER_EXACT)
    elif args.mode == aspe.CLOUD_RAW:
        if args.score_delta is None:
            raise CipherseekError("cloud-raw update needs --score-delta")
        incs = feedback.cloud_raw_increments(store, {args.doc_id: args.score_delta})
        new_store = feedback.apply_store_increments(store, incs, aspe.CLOUD_RAW)
    else:
        raise CipherseekError(f"unknown update mode {args.mode!r}")
    new_store.save(_out_path(args.out))
    print(f"updated {args.doc_id} via {args.mode} -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_scenario(args)
    if args.reps is not None:
        cfg = dataclasses.replace(cfg, repetitions=args.reps)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, bench_seed=args.seed)
    if args.timing:
        cfg = dataclasses.replace(cfg, timing=True)
    rows = harness.bench_fig3(cfg, out_path=_out_path(args.out))
    print(f"wrote {len(rows)} rows -> {args.out}")
    return 0


def cmd_report(args) -> int:
    rows = harness.read_bench_csv(args.csv)
    print(f"{'strategy':<12} {'k':>5} {'retrieved':>12} {'precision':>10}")
    for row in rows:
        print(f"{row['strategy']:<12} {row['k']:>5} "
              f"{float(row['retrieved_index_count']):>12.1f} "
              f"{float(row['precision']):>10.4f}")
    by_strategy = {}
    for row in rows:
        by_strategy.setdefault(row["strategy"], []).append(
            float(row["retrieved_index_count"]))
    print("\nmean retrieved indexes per strategy:")
    for strategy, counts in sorted(by_strategy.items()):
        print(f"  {strategy:<12} {sum(counts) / len(counts):10.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cipherseek",
        description="searchable encryption with learned index ranking",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a secret key file")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("ingest", help="build a dictionary from a corpus")
    _add_corpus_args(p)
    p.add_argument("--n-keywords", type=int, required=True)
    p.add_argument("--pseudo-slots", type=int, default=0)
    p.add_argument("--stats-out", help="also write corpus df stats (JSON)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("encrypt", help="build and encrypt index vectors")
    _add_corpus_args(p)
    p.add_argument("--dict", required=True)
    p.add_argument("--stats", help="corpus df stats from ingest")
    p.add_argument("--key", required=True)
    p.add_argument("--pad-mean", type=float, default=0.0)
    p.add_argument("--pad-sigma", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encrypt)

    p = sub.add_parser("train-rank", help="learn the probabilistic ranking")
    p.add_argument("--indexes", required=True, help="store file from encrypt")
    p.add_argument("--key", required=True)
    p.add_argument("--m", type=int, default=None,
                   help="random query count (default 50 per document)")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--distribution", default=ranking.NONNEG_UNIFORM,
                   choices=[ranking.SYMMETRIC_UNIFORM, ranking.NONNEG_UNIFORM])
    p.add_argument("--sparsity", type=float, default=0.005)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_rank)

    p = sub.add_parser("query", help="run one query against a store")
    p.add_argument("--store", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--keywords", required=True, help="comma-separated")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--strategy", default=queries.PR_CI,
                   choices=list(queries.STRATEGIES))
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--prune-margin", type=float, default=0.6)
    p.add_argument("--pseudo-policy", default=corpus.PSEUDO_RANDOM_SUBSET,
                   choices=[corpus.PSEUDO_ZEROS, corpus.PSEUDO_RANDOM_SUBSET])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("feedback-loop", help="run the query/update loop")
    p.add_argument("--config")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--channel", choices=[aspe.CLOUD_RAW, aspe.OWNER_EXACT,
                                         feedback.TRADITIONAL])
    p.add_argument("--feedback-log")
    p.add_argument("--audit-log")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_feedback_loop)

    p = sub.add_parser("update", help="apply one index update to a store")
    p.add_argument("--store", required=True)
    p.add_argument("--doc-id", required=True)
    p.add_argument("--mode", required=True,
                   choices=[aspe.OWNER_EXACT, aspe.CLOUD_RAW])
    p.add_argument("--key")
    p.add_argument("--delta-file", help="JSON array, plaintext delta (owner-exact)")
    p.add_argument("--score-delta", type=float, help="score shift (cloud-raw)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("bench", help="run the query-efficiency grid")
    p.add_argument("--config")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--timing", action="store_true",
                   help="record wall-clock times (breaks byte determinism)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="summarize a bench CSV")
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CipherseekError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: OSError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
