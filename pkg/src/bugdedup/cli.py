"""Command-line pipeline: ingest -> cluster -> split -> train -> evaluate.

Every subcommand echoes its full configuration (plus a SHA-256 of it)
into the artifact it produces, so any output file can be traced back to
the exact invocation that made it. JSON artifacts embed the echo; JSONL
and CSV artifacts get a ``<name>.config.json`` sidecar. Errors are
machine-readable JSON on stderr; usage problems exit 2, runtime
failures exit 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import cascade as cascade_mod
from . import classifier as classifier_mod
from . import corpus as corpus_mod
from . import dup_graph, embedder as embedder_mod, metrics as metrics_mod
from . import remote as remote_mod
from . import retrieval as retrieval_mod
from . import splitter as splitter_mod
from . import synth as synth_mod
from .ledger import CostLedger

EMBED_ENDPOINT_ENV = "BUGDEDUP_EMBED_ENDPOINT"
CLASSIFY_ENDPOINT_ENV = "BUGDEDUP_CLASSIFY_ENDPOINT"

_MODE_NAMES = {"one-vs-all": "one_vs_all", "all-vs-all": "all_vs_all"}
_METHOD_NAMES = {
    "retrieval": "retrieval_only",
    "classification": "classification_only",
    "cascade": "cascade",
}


class UsageError(ValueError):
    pass


def _fail_json(exc: Exception) -> None:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def _require_file(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return p


def _config_echo(args: argparse.Namespace) -> dict:
    # Keyed "cli" so it can never clobber an artifact's own config block.
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    blob = json.dumps(cfg, sort_keys=True, default=str)
    return {"cli": cfg, "config_sha256": hashlib.sha256(blob.encode("utf-8")).hexdigest()}


def _write_sidecar(out_path: str, echo: dict) -> None:
    Path(str(out_path) + ".config.json").write_text(
        json.dumps(echo, sort_keys=True, indent=1, default=str) + "\n", encoding="utf-8"
    )


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, default=str))


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise UsageError(f"--ratios needs three comma-separated fractions, got {text!r}")
    return (parts[0], parts[1], parts[2])


def _parse_k_list(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--k-list must be comma-separated integers, got {text!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise UsageError(f"--k-list values must be >= 1, got {text!r}")
    return ks


def _parse_caps(text: str | None) -> dict[str, int | None]:
    caps: dict[str, int | None] = {s: None for s in splitter_mod.SPLITS}
    if not text:
        return caps
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"--caps entries look like train=100, got {part!r}")
        split, value = part.split("=", 1)
        if split not in splitter_mod.SPLITS:
            raise UsageError(f"--caps split must be one of {splitter_mod.SPLITS}, got {split!r}")
        caps[split] = int(value)
    return caps


def _load_pipeline(args) -> tuple:
    corpus = corpus_mod.ingest(_require_file(args.corpus, "--corpus"))
    clusters = dup_graph.clusters_from_json(
        json.loads(_require_file(args.clusters, "--clusters").read_text(encoding="utf-8"))
    )
    manifest = splitter_mod.load_manifest(_require_file(args.manifest, "--manifest"))
    return corpus, clusters, manifest


def _fit_train_embedder(corpus, clusters, manifest, dim: int):
    train_texts = [corpus.by_id[b].clean_text for b in manifest.bugs_in(clusters, "train")]
    return embedder_mod.TfidfHashEmbedder.fit(train_texts, dim=dim)


def _make_embedder(args, corpus, clusters, manifest):
    if args.embed_backend == "tfidf":
        return _fit_train_embedder(corpus, clusters, manifest, args.dim)
    if args.embed_backend == "projection":
        model = embedder_mod.load_projection(_require_file(args.projection, "--projection"))
        base = _fit_train_embedder(corpus, clusters, manifest, model.dim_in)
        return embedder_mod.ProjectedEmbedder(base=base, model=model)
    endpoint = args.endpoint or os.environ.get(EMBED_ENDPOINT_ENV)
    if not endpoint:
        raise UsageError(f"--endpoint (or {EMBED_ENDPOINT_ENV}) is required for the service backend")
    return remote_mod.RemoteEmbedder(remote_mod.RemoteConfig(endpoint=endpoint))


def _make_classifier(args, corpus, clusters, manifest):
    if args.classifier_backend == "oracle":
        return classifier_mod.OracleClassifier(clusters)
    if args.classifier_backend == "service":
        endpoint = args.classify_endpoint or os.environ.get(CLASSIFY_ENDPOINT_ENV)
        if not endpoint:
            raise UsageError(
                f"--classify-endpoint (or {CLASSIFY_ENDPOINT_ENV}) is required for the service backend"
            )
        return remote_mod.RemoteClassifier(remote_mod.RemoteConfig(endpoint=endpoint))
    base = _fit_train_embedder(corpus, clusters, manifest, args.dim)
    featurizer = classifier_mod.PairFeaturizer(base)
    if args.classifier_backend == "similarity":
        return classifier_mod.SimilarityClassifier(featurizer, args.sim_threshold)
    model = classifier_mod.load_classifier(_require_file(args.model, "--model"))
    return classifier_mod.LogisticClassifier(model, featurizer)


def _resolve_pairs(corpus, pairs):
    return [(corpus.by_id[p.bug_a], corpus.by_id[p.bug_b], p.duplicate) for p in pairs]


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    config = synth_mod.SynthConfig(
        n_clusters=args.clusters,
        mean_size=args.mean_size,
        n_independents=args.independents,
        n_topics=args.topics,
        seed=args.seed,
    )
    corpus = synth_mod.synth_corpus(config)
    corpus_mod.write_jsonl(corpus, args.out)
    _write_sidecar(args.out, _config_echo(args))
    _emit({"out": args.out, **corpus_mod.corpus_stats(corpus).__dict__})
    return 0


def cmd_ingest(args) -> int:
    columns = tuple(args.csv_columns.split(",")) if args.csv_columns else corpus_mod.DEFAULT_CSV_COLUMNS
    corpus = corpus_mod.ingest(
        _require_file(args.infile, "--in"), format=args.format, csv_columns=columns
    )
    corpus_mod.write_jsonl(corpus, args.out)
    _write_sidecar(args.out, _config_echo(args))
    stats = corpus_mod.corpus_stats(corpus)
    _emit({"out": args.out, "dropped_relations": corpus.dropped_relations, **stats.__dict__})
    return 0


def cmd_cluster(args) -> int:
    corpus = corpus_mod.ingest(_require_file(args.corpus, "--corpus"))
    clusters = dup_graph.build_clusters(corpus)
    payload = dup_graph.clusters_to_json(clusters)
    payload.update(_config_echo(args))
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    stats = dup_graph.cluster_stats(clusters)
    _emit({"out": args.out, **stats.__dict__})
    return 0


def cmd_split(args) -> int:
    clusters = dup_graph.clusters_from_json(
        json.loads(_require_file(args.clusters, "--clusters").read_text(encoding="utf-8"))
    )
    manifest = splitter_mod.build_manifest(
        clusters,
        ratios=_parse_ratios(args.ratios),
        seed=args.seed,
        target_dup_ratio=args.dup_ratio,
        caps=_parse_caps(args.caps),
    )
    splitter_mod.save_manifest(manifest, args.out, extra=_config_echo(args))
    _emit({"out": args.out, "stats": splitter_mod.split_stats(manifest)})
    return 0


def cmd_train_projection(args) -> int:
    corpus, clusters, manifest = _load_pipeline(args)
    if not manifest.triplets:
        raise UsageError("--manifest holds no triplets; re-run split")
    base = _fit_train_embedder(corpus, clusters, manifest, args.dim)
    triplet_texts = [
        (
            corpus.by_id[t.anchor].clean_text,
            corpus.by_id[t.positive].clean_text,
            corpus.by_id[t.negative].clean_text,
        )
        for t in manifest.triplets
    ]
    cfg = embedder_mod.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        dim_out=args.dim_out,
        margin=args.margin,
    )
    model = embedder_mod.train_projection(triplet_texts, base, cfg)
    embedder_mod.save_projection(model, args.out, extra=_config_echo(args))
    _emit(
        {
            "out": args.out,
            "triplets": len(triplet_texts),
            "initial_loss": model.loss_curve[0],
            "final_loss": model.loss_curve[-1],
        }
    )
    return 0


def cmd_train_classifier(args) -> int:
    corpus, clusters, manifest = _load_pipeline(args)
    train_pairs = _resolve_pairs(corpus, manifest.pairs.get("train", []))
    dev_pairs = _resolve_pairs(corpus, manifest.pairs.get("dev", []))
    if not train_pairs:
        raise UsageError("--manifest holds no train pairs; re-run split")
    base = _fit_train_embedder(corpus, clusters, manifest, args.dim)
    cfg = classifier_mod.ClassifierTrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        threshold_step=args.threshold_step,
    )
    model = classifier_mod.train_classifier(train_pairs, base, cfg, dev_pairs=dev_pairs or None)
    classifier_mod.save_classifier(model, args.out, extra=_config_echo(args))
    _emit(
        {
            "out": args.out,
            "train_pairs": len(train_pairs),
            "dev_pairs": len(dev_pairs),
            "threshold": model.threshold,
            "initial_loss": model.loss_curve[0],
            "final_loss": model.loss_curve[-1],
        }
    )
    return 0


def cmd_eval_retrieval(args) -> int:
    corpus, clusters, manifest = _load_pipeline(args)
    k_list = _parse_k_list(args.k_list)
    groups = manifest.groups.get(args.split) or splitter_mod.generate_retrieval_groups(
        manifest, clusters, args.split
    )
    if not groups:
        raise UsageError(f"split {args.split!r} has no retrieval groups")
    emb = _make_embedder(args, corpus, clusters, manifest)
    split_reports = [corpus.by_id[b] for b in manifest.bugs_in(clusters, args.split)]

    ledger = CostLedger()
    start = time.monotonic()
    index = retrieval_mod.build_index(emb, split_reports, ledger)
    vec_of = {bug_id: index.matrix[i] for i, bug_id in enumerate(index.ids)}
    outcomes = []
    kmax = max(k_list)
    for group in groups:
        ranked = retrieval_mod.top_k(
            index, vec_of[group.query], kmax, exclude=group.query, ledger=ledger, query=group.query
        )
        outcomes.append(
            metrics_mod.QueryOutcome(
                query=group.query,
                candidates=ranked.ids(),
                kept=tuple(True for _ in ranked.ranked),
                relevant=frozenset(group.relevant),
                db_size=len(index) - 1,
            )
        )
    rows = metrics_mod.aggregate_curves(outcomes, k_list)
    elapsed_ms = (time.monotonic() - start) * 1000.0

    csv_rows = []
    for row in rows:
        payload = row.to_json()
        payload.update(
            {
                "method": f"retrieval_{args.embed_backend}",
                "wall_clock_ms": elapsed_ms,
                "embed_calls": ledger.embed_calls,
                "pair_classifications": ledger.pair_classifications,
            }
        )
        csv_rows.append(payload)
    metrics_mod.write_metrics_csv(args.out, csv_rows)
    _write_sidecar(args.out, _config_echo(args))
    _emit({"out": args.out, "queries": len(outcomes), "k_list": k_list})
    return 0


def cmd_eval_classification(args) -> int:
    corpus, clusters, manifest = _load_pipeline(args)
    pairs = manifest.pairs.get(args.split, [])
    if not pairs:
        raise UsageError(f"split {args.split!r} holds no labeled pairs")
    backend = _make_classifier(args, corpus, clusters, manifest)
    ledger = CostLedger()
    start = time.monotonic()
    verdicts = backend.classify_batch(
        [(corpus.by_id[p.bug_a], corpus.by_id[p.bug_b]) for p in pairs], ledger
    )
    cm = metrics_mod.ConfusionMatrix.from_decisions(
        (label, p.duplicate) for (_, label), p in zip(verdicts, pairs)
    )
    row = metrics_mod.classification_metrics(cm)
    elapsed_ms = (time.monotonic() - start) * 1000.0
    payload = row.to_json()
    payload.update(
        {
            "method": f"classification_{args.classifier_backend}",
            "k": "",
            "wall_clock_ms": elapsed_ms,
            "embed_calls": ledger.embed_calls,
            "pair_classifications": ledger.pair_classifications,
        }
    )
    metrics_mod.write_metrics_csv(args.out, [payload])
    _write_sidecar(args.out, _config_echo(args))
    _emit({"out": args.out, "pairs": len(pairs), "f1": row.f1, "accuracy": row.accuracy})
    return 0


def cmd_run_cascade(args) -> int:
    corpus, clusters, manifest = _load_pipeline(args)
    config = cascade_mod.ScenarioConfig(
        mode=_MODE_NAMES[args.mode],
        method=_METHOD_NAMES[args.method],
        k=args.k,
        query_fraction=args.query_fraction,
        seed=args.seed,
        include_independents=not args.exclude_independents,
        dedup_pairs=args.dedup_pairs,
    )
    emb = _make_embedder(args, corpus, clusters, manifest)
    clf = _make_classifier(args, corpus, clusters, manifest)
    runner = (
        cascade_mod.run_one_vs_all if config.mode == "one_vs_all" else cascade_mod.run_all_vs_all
    )
    result = runner(config, manifest, clusters, corpus, emb, clf)
    cascade_mod.save_scenario(result, args.out, extra=_config_echo(args))
    _emit(
        {
            "out": args.out,
            "n_queries": result.n_queries,
            "db_size": result.db_size,
            "ledger": {k: v for k, v in result.ledger.items() if k != "wall_clock_ms"},
        }
    )
    return 0


def cmd_report(args) -> int:
    payloads = []
    for path in args.inputs:
        payloads.append(json.loads(_require_file(path, "--in").read_text(encoding="utf-8")))
    shared_keys = ("mode", "seed", "query_fraction", "include_independents", "dedup_pairs")
    baseline = {k: payloads[0]["config"][k] for k in shared_keys}
    for path, payload in zip(args.inputs, payloads):
        got = {k: payload["config"][k] for k in shared_keys}
        if got != baseline:
            raise UsageError(
                f"conflicting scenario configs: {path} has {got}, expected {baseline}"
            )
    rows = []
    for payload in payloads:
        native_k = payload["config"]["k"]
        for row in payload["metrics"]:
            if payload["config"]["method"] == "classification_only" or row["k"] == native_k:
                rows.append(row)
    rows.sort(key=lambda r: (r["method"], r["k"] if isinstance(r["k"], int) else -1))
    metrics_mod.write_metrics_csv(args.out, rows)
    _write_sidecar(args.out, _config_echo(args))
    _emit({"out": args.out, "rows": len(rows), "inputs": len(payloads)})
    return 0


# ---------------------------------------------------------------- parser


def _add_embed_flags(p: argparse.ArgumentParser, flag: str) -> None:
    p.add_argument(
        flag, dest="embed_backend", choices=("tfidf", "projection", "service"), default="tfidf"
    )
    p.add_argument("--projection", help="trained projection file (projection backend)")
    p.add_argument("--endpoint", help=f"embedding service URL (or ${EMBED_ENDPOINT_ENV})")


def _add_classifier_flags(p: argparse.ArgumentParser, flag: str, with_oracle: bool) -> None:
    choices = ("logistic", "similarity", "service") + (("oracle",) if with_oracle else ())
    p.add_argument(flag, dest="classifier_backend", choices=choices, default="similarity")
    p.add_argument("--model", help="trained classifier file (logistic backend)")
    p.add_argument("--sim-threshold", type=float, default=0.5)
    p.add_argument("--classify-endpoint", help=f"classifier service URL (or ${CLASSIFY_ENDPOINT_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bugdedup", description="Duplicate bug report detection pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted synthetic corpus")
    p.add_argument("--clusters", type=int, default=50)
    p.add_argument("--mean-size", type=float, default=3.0)
    p.add_argument("--independents", type=int, default=None)
    p.add_argument("--topics", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="normalize a raw corpus into canonical JSONL")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--csv-columns", help="bug_id,title,description,dup_of column mapping")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("cluster", help="build duplicate clusters (transitive closure)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("split", help="leakage-free train/dev/test manifest")
    p.add_argument("--clusters", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument(
        "--dup-ratio",
        type=float,
        default=splitter_mod.DEFAULT_TARGET_DUP_RATIO,
        help="duplicate fraction targeted in dev/test pair mixes",
    )
    p.add_argument("--caps", help="per-split duplicate-pair caps, e.g. train=100,dev=50,test=50")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-projection", help="fit the triplet-loss projection")
    p.add_argument("--corpus", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dim", type=int, default=embedder_mod.DEFAULT_DIM)
    p.add_argument("--dim-out", type=int, default=embedder_mod.DEFAULT_PROJECTION_DIM)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--margin", type=float, default=embedder_mod.DEFAULT_MARGIN)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_projection)

    p = sub.add_parser("train-classifier", help="fit the logistic pair classifier")
    p.add_argument("--corpus", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dim", type=int, default=embedder_mod.DEFAULT_DIM)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--threshold-step", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("eval-retrieval", help="per-k recall/precision over a split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=splitter_mod.SPLITS, default="test")
    p.add_argument("--k-list", default="1,5,10,20,60,100")
    p.add_argument("--dim", type=int, default=embedder_mod.DEFAULT_DIM)
    _add_embed_flags(p, "--backend")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-classification", help="pairwise metrics over a split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=splitter_mod.SPLITS, default="test")
    p.add_argument("--dim", type=int, default=embedder_mod.DEFAULT_DIM)
    _add_classifier_flags(p, "--backend", with_oracle=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_classification)

    p = sub.add_parser("run-cascade", help="run a scenario end to end")
    p.add_argument("--corpus", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=tuple(_MODE_NAMES), required=True)
    p.add_argument("--method", choices=tuple(_METHOD_NAMES), required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--query-fraction", type=float, default=0.2)
    p.add_argument("--dedup-pairs", action="store_true")
    p.add_argument("--exclude-independents", action="store_true")
    p.add_argument("--dim", type=int, default=embedder_mod.DEFAULT_DIM)
    _add_embed_flags(p, "--embed-backend")
    _add_classifier_flags(p, "--classifier-backend", with_oracle=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_cascade)

    p = sub.add_parser("report", help="merge scenario outputs into one CSV")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        _fail_json(exc)
        return 2
    except FileNotFoundError as exc:
        _fail_json(exc)
        return 2
    except (
        corpus_mod.IngestError,
        splitter_mod.SplitError,
        cascade_mod.ScenarioError,
        remote_mod.RemoteError,
        embedder_mod.TrainingError,
        ValueError,
        json.JSONDecodeError,
        KeyError,
    ) as exc:
        _fail_json(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
