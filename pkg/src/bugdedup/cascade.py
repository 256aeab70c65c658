"""Scenario runner: the retrieve-then-classify cascade and its baselines.

Three methods answer "which database bugs duplicate this query":

* retrieval_only       - the top-k most similar are the predictions.
* classification_only  - every (query, database) pair is classified.
* cascade              - top-k retrieval, then the classifier filters.

Two scenarios drive them. One-vs-all partitions the test bugs into
incoming queries and a fixed database; all-vs-all queries every bug
against all the others. The point of the cascade is the cost shape:
classification alone needs n*m pair inferences, the cascade needs n+m
embeddings plus n*k classifications, and the ledger proves it run by
run against the closed forms in ``predict_cost``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import BugReport, Corpus
from .dup_graph import ClusterSet
from .ledger import CostLedger
from .metrics import MetricRow, QueryOutcome, aggregate_curves, classification_metrics
from .retrieval import VectorIndex, top_k
from .seeding import substream_rng
from .splitter import SplitManifest

MODES = ("one_vs_all", "all_vs_all")
METHODS = ("retrieval_only", "classification_only", "cascade")

DEFAULT_K_CAP = 100


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str
    method: str
    k: int = 20
    query_fraction: float = 0.2
    seed: int = 0
    include_independents: bool = True
    dedup_pairs: bool = False
    max_k: int = DEFAULT_K_CAP

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.method not in METHODS:
            raise ScenarioError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.k < 1:
            raise ScenarioError("k must be >= 1")
        if self.k > self.max_k:
            raise ScenarioError(f"k={self.k} exceeds the cap of {self.max_k}")
        if self.mode == "one_vs_all" and not 0.0 < self.query_fraction < 1.0:
            raise ScenarioError("query_fraction must lie in (0,1) for one_vs_all")

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "method": self.method,
            "k": self.k,
            "query_fraction": self.query_fraction,
            "seed": self.seed,
            "include_independents": self.include_independents,
            "dedup_pairs": self.dedup_pairs,
            "max_k": self.max_k,
        }


def predict_cost(method: str, n: int, m: int, k: int | None = None) -> dict[str, int]:
    """Closed-form counter predictions for a one-vs-all run.

    n queries against an m-bug database. For the cascade, k is clamped
    to m: a query cannot retrieve more candidates than the database
    holds, so that is also all it can classify.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    if method == "classification_only":
        return {"embed_calls": 0, "pair_classifications": n * m, "similarity_ops": 0}
    if method == "retrieval_only":
        return {"embed_calls": n + m, "pair_classifications": 0, "similarity_ops": n * m}
    if k is None or k < 1:
        raise ValueError("cascade requires k >= 1")
    return {
        "embed_calls": n + m,
        "pair_classifications": n * min(k, m),
        "similarity_ops": n * m,
    }


def predict_cost_all_vs_all(
    method: str, m: int, k: int | None = None, dedup_pairs: bool = False
) -> dict[str, int]:
    """Closed forms when every one of m bugs queries the other m-1.

    Embeddings are cached, so retrieval-bearing methods embed exactly m
    texts. Cascade with pair dedup has no closed form (the classified
    set depends on the rankings), so that combination is refused.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if m < 2:
        raise ValueError("all_vs_all requires at least 2 bugs")
    scans = m * (m - 1)
    if method == "classification_only":
        pairs = scans // 2 if dedup_pairs else scans
        return {"embed_calls": 0, "pair_classifications": pairs, "similarity_ops": 0}
    if method == "retrieval_only":
        return {"embed_calls": m, "pair_classifications": 0, "similarity_ops": scans}
    if k is None or k < 1:
        raise ValueError("cascade requires k >= 1")
    if dedup_pairs:
        raise ValueError("no closed form for cascade with dedup_pairs; audit the ledger instead")
    return {
        "embed_calls": m,
        "pair_classifications": m * min(k, m - 1),
        "similarity_ops": scans,
    }


@dataclass(frozen=True)
class QueryRecord:
    """One query's candidates: (bug_id, score, kept) in rank order."""

    query: str
    candidates: tuple[tuple[str, float, bool], ...]
    relevant: tuple[str, ...]
    db_size: int

    def outcome(self) -> QueryOutcome:
        return QueryOutcome(
            query=self.query,
            candidates=tuple(c for c, _, _ in self.candidates),
            kept=tuple(kept for _, _, kept in self.candidates),
            relevant=frozenset(self.relevant),
            db_size=self.db_size,
        )


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    records: list[QueryRecord]
    metric_rows: list[MetricRow]
    ledger: dict
    timing_ms: dict[str, float]
    n_queries: int
    db_size: int
    queries_without_peers: int
    avg_query_ms: float = 0.0
    extra: dict = field(default_factory=dict)


def run_partition(
    queries: Sequence[BugReport],
    database: Sequence[BugReport],
    cluster_set: ClusterSet,
    embedder,
    pair_classifier,
    method: str,
    k: int,
    exclude_self: bool = False,
    dedup_pairs: bool = False,
) -> tuple[list[QueryRecord], CostLedger]:
    """Run one method over an explicit query/database partition.

    This is the engine under both scenarios; the ledger it returns holds
    the exact counter values for the run. Texts are embedded at most
    once each, which is what makes the n+m accounting true.
    """
    if method not in METHODS:
        raise ScenarioError(f"unknown method {method!r}")
    if not queries or not database:
        raise ScenarioError("query set and database must both be nonempty")
    queries = sorted(queries, key=lambda r: r.bug_id)
    database = sorted(database, key=lambda r: r.bug_id)
    db_ids = [r.bug_id for r in database]
    if len(set(db_ids)) != len(db_ids):
        raise ScenarioError("duplicate bug ids in database")
    db_by_id = {r.bug_id: r for r in database}

    ledger = CostLedger()
    peer_map: dict[str, tuple[str, ...]] = {}
    for c in cluster_set.clusters:
        for member in c.members:
            peer_map[member] = tuple(x for x in c.members if x != member)
    relevant_of = {
        q.bug_id: tuple(
            sorted(p for p in peer_map.get(q.bug_id, ()) if p in db_by_id)
        )
        for q in queries
    }

    if method == "classification_only":
        records = _run_classification_only(
            queries, database, pair_classifier, ledger, exclude_self, dedup_pairs, relevant_of
        )
        return records, ledger

    with ledger.phase("embed"):
        unique = {r.bug_id: r for r in list(queries) + list(database)}
        ordered = [unique[bug_id] for bug_id in sorted(unique)]
        vectors = embedder.embed_texts([r.clean_text for r in ordered])
        ledger.count_embeds(len(ordered))
        vec_of = {r.bug_id: vectors[i] for i, r in enumerate(ordered)}
        index = VectorIndex.from_vectors(db_ids, np.stack([vec_of[b] for b in db_ids]))

    ranked_of = {}
    with ledger.phase("search"):
        for q in queries:
            ranked = top_k(
                index,
                vec_of[q.bug_id],
                k,
                exclude=q.bug_id if exclude_self else None,
                ledger=ledger,
                query=q.bug_id,
            )
            ranked_of[q.bug_id] = ranked.ranked

    records: list[QueryRecord] = []
    if method == "retrieval_only":
        for q in queries:
            db_size = len(database) - (1 if exclude_self and q.bug_id in db_by_id else 0)
            records.append(
                QueryRecord(
                    query=q.bug_id,
                    candidates=tuple((b, s, True) for b, s in ranked_of[q.bug_id]),
                    relevant=relevant_of[q.bug_id],
                    db_size=db_size,
                )
            )
        return records, ledger

    pair_cache: dict[tuple[str, str], tuple[float, bool]] = {}
    with ledger.phase("classify"):
        for q in queries:
            pairs = [(q, db_by_id[b]) for b, _ in ranked_of[q.bug_id]]
            verdicts = _classify_pairs(pair_classifier, pairs, ledger, dedup_pairs, pair_cache)
            db_size = len(database) - (1 if exclude_self and q.bug_id in db_by_id else 0)
            records.append(
                QueryRecord(
                    query=q.bug_id,
                    candidates=tuple(
                        (b, s, verdicts[i][1]) for i, (b, s) in enumerate(ranked_of[q.bug_id])
                    ),
                    relevant=relevant_of[q.bug_id],
                    db_size=db_size,
                )
            )
    return records, ledger


def _classify_pairs(pair_classifier, pairs, ledger, dedup_pairs, pair_cache):
    if not dedup_pairs:
        return pair_classifier.classify_batch(pairs, ledger)
    missing = []
    for a, b in pairs:
        key = (a.bug_id, b.bug_id) if a.bug_id < b.bug_id else (b.bug_id, a.bug_id)
        if key not in pair_cache:
            missing.append((key, (a, b)))
    fresh = pair_classifier.classify_batch([p for _, p in missing], ledger)
    for (key, _), verdict in zip(missing, fresh):
        pair_cache[key] = verdict
    out = []
    for a, b in pairs:
        key = (a.bug_id, b.bug_id) if a.bug_id < b.bug_id else (b.bug_id, a.bug_id)
        out.append(pair_cache[key])
    return out


def _run_classification_only(
    queries, database, pair_classifier, ledger, exclude_self, dedup_pairs, relevant_of
) -> list[QueryRecord]:
    pair_cache: dict[tuple[str, str], tuple[float, bool]] = {}
    records = []
    with ledger.phase("classify"):
        for q in queries:
            others = [d for d in database if not (exclude_self and d.bug_id == q.bug_id)]
            pairs = [(q, d) for d in others]
            verdicts = _classify_pairs(pair_classifier, pairs, ledger, dedup_pairs, pair_cache)
            scored = sorted(
                (
                    (d.bug_id, verdicts[i][0], verdicts[i][1])
                    for i, d in enumerate(others)
                ),
                key=lambda t: (-t[1], t[0]),
            )
            records.append(
                QueryRecord(
                    query=q.bug_id,
                    candidates=tuple(scored),
                    relevant=relevant_of[q.bug_id],
                    db_size=len(others),
                )
            )
    return records


def _scenario_pool(
    config: ScenarioConfig, manifest: SplitManifest, cluster_set: ClusterSet, corpus: Corpus
) -> list[BugReport]:
    clustered = {
        m
        for c in manifest.clusters_in(cluster_set, "test")
        for m in c.members
    }
    pool = set(clustered)
    if config.include_independents:
        pool.update(b for b, s in manifest.independent_assignment.items() if s == "test")
    return [corpus.by_id[b] for b in sorted(pool)]


def run_one_vs_all(
    config: ScenarioConfig,
    manifest: SplitManifest,
    cluster_set: ClusterSet,
    corpus: Corpus,
    embedder,
    pair_classifier,
) -> ScenarioResult:
    """Partition test bugs into queries and database by seed, then run.

    Ground truth for each query is cluster co-membership with database
    bugs. Queries without any in-database peer stay in the run (they can
    only contribute false positives) and are counted separately.
    """
    if config.mode != "one_vs_all":
        raise ScenarioError(f"config.mode is {config.mode!r}")
    pool = _scenario_pool(config, manifest, cluster_set, corpus)
    if len(pool) < 2:
        raise ScenarioError(f"test split holds {len(pool)} bugs; need at least 2")
    rng = substream_rng(config.seed, "scenario.partition")
    order = rng.permutation(len(pool))
    n_queries = round(config.query_fraction * len(pool))
    if n_queries < 1 or n_queries >= len(pool):
        raise ScenarioError(
            f"query_fraction {config.query_fraction} leaves an empty side "
            f"({n_queries} of {len(pool)} as queries)"
        )
    queries = [pool[int(i)] for i in order[:n_queries]]
    database = [pool[int(i)] for i in order[n_queries:]]

    records, ledger = run_partition(
        queries,
        database,
        cluster_set,
        embedder,
        pair_classifier,
        config.method,
        config.k,
        exclude_self=False,
        dedup_pairs=config.dedup_pairs,
    )
    return _build_result(config, records, ledger, len(queries), len(database))


def run_all_vs_all(
    config: ScenarioConfig,
    manifest: SplitManifest,
    cluster_set: ClusterSet,
    corpus: Corpus,
    embedder,
    pair_classifier,
) -> ScenarioResult:
    """Every test bug queries all the others (self excluded)."""
    if config.mode != "all_vs_all":
        raise ScenarioError(f"config.mode is {config.mode!r}")
    pool = _scenario_pool(config, manifest, cluster_set, corpus)
    if len(pool) < 2:
        raise ScenarioError(f"test split holds {len(pool)} bugs; need at least 2")
    records, ledger = run_partition(
        pool,
        pool,
        cluster_set,
        embedder,
        pair_classifier,
        config.method,
        config.k,
        exclude_self=True,
        dedup_pairs=config.dedup_pairs,
    )
    return _build_result(config, records, ledger, len(pool), len(pool))


def _build_result(
    config: ScenarioConfig,
    records: list[QueryRecord],
    ledger: CostLedger,
    n_queries: int,
    db_size: int,
) -> ScenarioResult:
    outcomes = [r.outcome() for r in records]
    if config.method == "classification_only":
        rows = _classification_rows(outcomes, config.k)
    else:
        rows = aggregate_curves(outcomes, list(range(1, config.k + 1)))
    snapshot = ledger.snapshot()
    total_ms = sum(snapshot["wall_clock_ms"].values())
    return ScenarioResult(
        config=config,
        records=records,
        metric_rows=rows,
        ledger=snapshot,
        timing_ms={**snapshot["wall_clock_ms"], "total": total_ms},
        n_queries=n_queries,
        db_size=db_size,
        queries_without_peers=sum(1 for o in outcomes if not o.relevant),
        avg_query_ms=total_ms / n_queries if n_queries else 0.0,
    )


def _classification_rows(outcomes: Sequence[QueryOutcome], k: int) -> list[MetricRow]:
    """Exhaustive classification ignores k: one row, every decision counted."""
    total = None
    recalls: list[float] = []
    precisions: list[float] = []
    for o in outcomes:
        cm = o.confusion_at(len(o.candidates))
        total = cm if total is None else total + cm
        if o.relevant:
            recalls.append(cm.tp / len(o.relevant))
        denom = cm.tp + cm.fp
        precisions.append(cm.tp / denom if denom else 0.0)
    row = classification_metrics(total, k=k)
    return [
        MetricRow(
            precision=row.precision,
            recall=row.recall,
            f1=row.f1,
            accuracy=row.accuracy,
            k=k,
            tp=row.tp,
            fp=row.fp,
            fn=row.fn,
            tn=row.tn,
            zero_denominator=row.zero_denominator,
            macro_precision=sum(precisions) / len(precisions) if precisions else 0.0,
            macro_recall=sum(recalls) / len(recalls) if recalls else None,
        )
    ]


def scenario_to_json(result: ScenarioResult) -> dict:
    """Full scenario artifact: config echo, ledger, metric rows, timings."""
    rows = []
    for row in result.metric_rows:
        payload = row.to_json()
        payload.update(
            {
                "method": result.config.method,
                "wall_clock_ms": result.timing_ms.get("total", 0.0),
                "embed_calls": result.ledger["embed_calls"],
                "pair_classifications": result.ledger["pair_classifications"],
            }
        )
        rows.append(payload)
    return {
        "config": result.config.to_json(),
        "n_queries": result.n_queries,
        "db_size": result.db_size,
        "queries_without_peers": result.queries_without_peers,
        "ledger": result.ledger,
        "timing_ms": result.timing_ms,
        "avg_query_ms": result.avg_query_ms,
        "metrics": rows,
        "per_query": [
            {
                "query": r.query,
                "relevant": list(r.relevant),
                "db_size": r.db_size,
                "candidates": [[b, s, bool(kept)] for b, s, kept in r.candidates],
            }
            for r in result.records
        ],
        **result.extra,
    }


_TIMING_KEYS = {"wall_clock_ms", "timing_ms", "avg_query_ms", "total", "total_ms"}


def _scrub_timings(node):
    if isinstance(node, dict):
        return {
            key: (_zeroed(value) if key in _TIMING_KEYS else _scrub_timings(value))
            for key, value in node.items()
        }
    if isinstance(node, list):
        return [_scrub_timings(item) for item in node]
    return node


def _zeroed(value):
    if isinstance(value, dict):
        return {k: _zeroed(v) for k, v in value.items()}
    if isinstance(value, (int, float)):
        return 0.0
    return value


def canonical_scenario_bytes(payload: dict) -> bytes:
    """Deterministic byte form of a scenario artifact.

    Wall-clock fields are physical measurements and legitimately differ
    between runs, so they are zeroed before comparison; everything else
    must match bit for bit for runs with equal seeds and configs.
    """
    scrubbed = _scrub_timings(copy.deepcopy(payload))
    return (json.dumps(scrubbed, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def save_scenario(result: ScenarioResult, path: str | Path, extra: dict | None = None) -> None:
    payload = scenario_to_json(result)
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
