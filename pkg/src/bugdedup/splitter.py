"""Leakage-free train/dev/test splitting and pair/triplet generation.

Whole clusters (never individual bugs) are assigned to splits, so no bug
can appear on both sides of a train/test boundary, directly or through a
pair. Pair labels come from cluster co-membership: within a cluster every
unordered member pair is a duplicate pair; negatives are sampled across
distinct clusters (independents included) of the same split.

Train pairs are balanced 1:1. Dev and test are deliberately skewed: the
negative count is chosen so duplicates make up ``target_dup_ratio`` of
the split's pairs, mirroring how rare duplicates are in live triage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

from .dup_graph import Cluster, ClusterSet
from .seeding import substream_rng

SPLITS = ("train", "dev", "test")

DEFAULT_RATIOS = (0.8, 0.1, 0.1)
DEFAULT_TARGET_DUP_RATIO = 0.1564  # skew of the dev/test pair mix

_MASS_EPS_FACTOR = 1e-9


class SplitError(ValueError):
    """Raised when a split cannot be constructed as requested."""


@dataclass(frozen=True)
class LabeledPair:
    bug_a: str
    bug_b: str
    duplicate: bool


@dataclass(frozen=True)
class TripletExample:
    anchor: str
    positive: str
    negative: str


@dataclass(frozen=True)
class RetrievalGroup:
    query: str
    relevant: tuple[str, ...]


@dataclass
class SplitManifest:
    """Persistent record of one split: assignment, pairs, triplets, groups.

    Built in stages: ``split_clusters`` fills the assignment, then
    ``generate_pairs`` / ``generate_triplets`` / ``generate_retrieval_groups``
    fill the rest. All stages are deterministic in (inputs, seed).
    """

    seed: int
    ratios: tuple[float, float, float]
    target_dup_ratio: float
    caps: dict[str, int | None]
    cluster_assignment: dict[int, str]
    independent_assignment: dict[str, str]
    pairs: dict[str, list[LabeledPair]] = field(default_factory=dict)
    triplets: list[TripletExample] = field(default_factory=list)
    groups: dict[str, list[RetrievalGroup]] = field(default_factory=dict)

    def clusters_in(self, cluster_set: ClusterSet, split: str) -> list[Cluster]:
        return [c for c in cluster_set.clusters if self.cluster_assignment[c.cluster_id] == split]

    def bugs_in(self, cluster_set: ClusterSet, split: str) -> list[str]:
        """All bug ids of a split (cluster members plus independents), sorted."""
        bugs = [m for c in self.clusters_in(cluster_set, split) for m in c.members]
        bugs.extend(b for b, s in self.independent_assignment.items() if s == split)
        return sorted(bugs)


def count_dup_pairs(cluster_size: int) -> int:
    """Number of unordered duplicate pairs a cluster of n bugs yields."""
    if cluster_size < 1:
        raise ValueError("cluster_size must be >= 1")
    return cluster_size * (cluster_size - 1) // 2


def _validate_ratios(ratios: tuple[float, float, float]) -> None:
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise SplitError(f"ratios must be three positive fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)}")


def split_clusters(
    cluster_set: ClusterSet,
    ratios: tuple[float, float, float] = DEFAULT_RATIOS,
    seed: int = 0,
    target_dup_ratio: float = DEFAULT_TARGET_DUP_RATIO,
    caps: dict[str, int | None] | None = None,
) -> SplitManifest:
    """Assign whole clusters (and independents) to train/dev/test.

    Clusters are shuffled by the seeded RNG, then assigned greedily so
    each split's share of duplicate-bug mass (sum of its cluster sizes)
    approximates the requested ratios. Large clusters therefore cannot
    silently concentrate in one split. Independents are shuffled and cut
    by the same ratios. If the greedy pass leaves a split without any
    cluster, the emptiest split is topped up from the fullest one, so
    with at least 3 clusters every split holds at least one.
    """
    _validate_ratios(ratios)
    clusters = cluster_set.clusters
    if len(clusters) < 3:
        raise SplitError(f"need at least 3 clusters to populate all splits, got {len(clusters)}")

    rng = substream_rng(seed, "split")
    order = rng.permutation(len(clusters))

    total_mass = sum(c.size for c in clusters)
    quotas = [r * total_mass for r in ratios]
    eps = _MASS_EPS_FACTOR * total_mass
    filled = [0.0, 0.0, 0.0]
    per_split: dict[str, list[int]] = {s: [] for s in SPLITS}
    idx = 0
    for pos in order:
        while idx < 2 and filled[idx] + eps >= quotas[idx]:
            idx += 1
        cluster = clusters[int(pos)]
        per_split[SPLITS[idx]].append(cluster.cluster_id)
        filled[idx] += cluster.size

    _rebalance_empty_splits(per_split)

    assignment = {cid: split for split, cids in per_split.items() for cid in cids}

    ind_rng = substream_rng(seed, "independents")
    independents = list(cluster_set.independents)
    ind_order = ind_rng.permutation(len(independents))
    n = len(independents)
    cut1 = round(ratios[0] * n)
    cut2 = round((ratios[0] + ratios[1]) * n)
    independent_assignment: dict[str, str] = {}
    for i, pos in enumerate(ind_order):
        split = "train" if i < cut1 else ("dev" if i < cut2 else "test")
        independent_assignment[independents[int(pos)]] = split

    return SplitManifest(
        seed=seed,
        ratios=tuple(ratios),
        target_dup_ratio=target_dup_ratio,
        caps=dict(caps) if caps else {s: None for s in SPLITS},
        cluster_assignment=assignment,
        independent_assignment=independent_assignment,
    )


def _rebalance_empty_splits(per_split: dict[str, list[int]]) -> None:
    # Move the most recently assigned cluster out of the fullest split;
    # deterministic because insertion order is the shuffled order.
    for split in SPLITS:
        while not per_split[split]:
            donor = max(SPLITS, key=lambda s: len(per_split[s]))
            if len(per_split[donor]) < 2:
                raise SplitError("cannot populate all splits with a nonempty cluster")
            per_split[split].append(per_split[donor].pop())


def generate_pairs(
    manifest: SplitManifest,
    cluster_set: ClusterSet,
    caps: dict[str, int | None] | None = None,
    seed: int | None = None,
) -> dict[str, list[LabeledPair]]:
    """Enumerate duplicate pairs and sample non-duplicate pairs per split.

    Duplicate pairs are every unordered member pair of each cluster of
    the split, subsampled reproducibly when a cap is set. Negatives are
    sampled uniformly without replacement across distinct clusters and
    independents of the same split, count chosen by the balance rule
    (train 1:1, dev/test from target_dup_ratio). No pair ever crosses a
    split boundary.
    """
    caps = caps if caps is not None else manifest.caps
    seed = seed if seed is not None else manifest.seed
    membership = {m: c.cluster_id for c in cluster_set.clusters for m in c.members}

    pairs: dict[str, list[LabeledPair]] = {}
    for split in SPLITS:
        split_clusters_ = manifest.clusters_in(cluster_set, split)
        if not split_clusters_:
            raise SplitError(f"split {split!r} has no clusters of size >= 2; cannot generate pairs")

        dup = [
            (a, b)
            for c in split_clusters_
            for a, b in combinations(c.members, 2)
        ]
        cap = caps.get(split)
        if cap is not None and cap < len(dup):
            rng = substream_rng(seed, f"pairs.dup:{split}")
            chosen = rng.choice(len(dup), size=cap, replace=False)
            dup = [dup[i] for i in sorted(int(i) for i in chosen)]

        if split == "train":
            n_neg = len(dup)
        else:
            r = manifest.target_dup_ratio
            n_neg = round(len(dup) * (1.0 - r) / r)

        bugs = manifest.bugs_in(cluster_set, split)
        neg_rng = substream_rng(seed, f"pairs.neg:{split}")
        negatives = _sample_negatives(bugs, membership, n_neg, neg_rng, split)

        pairs[split] = [LabeledPair(a, b, True) for a, b in dup] + [
            LabeledPair(a, b, False) for a, b in negatives
        ]

    manifest.pairs = pairs
    return pairs


def _sample_negatives(
    bugs: list[str],
    membership: dict[str, int],
    count: int,
    rng,
    split: str,
) -> list[tuple[str, str]]:
    """Uniform sample (without replacement) of cross-cluster pairs."""
    n = len(bugs)
    by_cluster: dict[int, int] = {}
    for b in bugs:
        cid = membership.get(b)
        if cid is not None:
            by_cluster[cid] = by_cluster.get(cid, 0) + 1
    pool = n * (n - 1) // 2 - sum(k * (k - 1) // 2 for k in by_cluster.values())
    if count > pool:
        raise SplitError(
            f"split {split!r} needs {count} non-duplicate pairs but only {pool} exist"
        )
    if count == 0:
        return []

    def is_dup(a: str, b: str) -> bool:
        ca = membership.get(a)
        return ca is not None and ca == membership.get(b)

    if count * 3 >= pool:
        # Dense request: enumerate the pool and sample exactly.
        eligible = [
            (a, b) for a, b in combinations(bugs, 2) if not is_dup(a, b)
        ]
        chosen = rng.choice(len(eligible), size=count, replace=False)
        return [eligible[i] for i in sorted(int(i) for i in chosen)]

    # Sparse request: rejection-sample distinct cross-cluster pairs.
    seen: set[tuple[str, str]] = set()
    out: list[tuple[str, str]] = []
    while len(out) < count:
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        a, b = bugs[int(i)], bugs[int(j)]
        if a > b:
            a, b = b, a
        if (a, b) in seen or is_dup(a, b):
            continue
        seen.add((a, b))
        out.append((a, b))
    return sorted(out)


def generate_triplets(
    manifest: SplitManifest,
    cluster_set: ClusterSet,
    seed: int | None = None,
) -> list[TripletExample]:
    """Build train triplets: one per ordered train duplicate pair.

    Each unordered duplicate pair (a, b) yields the two ordered examples
    (anchor=a, positive=b) and (anchor=b, positive=a); the negative is
    drawn uniformly from train bugs outside the anchor's cluster
    (independents included).
    """
    if "train" not in manifest.pairs:
        raise SplitError("generate_pairs must run before generate_triplets")
    seed = seed if seed is not None else manifest.seed
    rng = substream_rng(seed, "triplets")

    train_bugs = manifest.bugs_in(cluster_set, "train")
    membership = {m: c.cluster_id for c in cluster_set.clusters for m in c.members}
    eligible_by_cluster: dict[int, list[str]] = {}
    for c in manifest.clusters_in(cluster_set, "train"):
        members = set(c.members)
        eligible_by_cluster[c.cluster_id] = [b for b in train_bugs if b not in members]

    triplets: list[TripletExample] = []
    for pair in manifest.pairs["train"]:
        if not pair.duplicate:
            continue
        for anchor, positive in ((pair.bug_a, pair.bug_b), (pair.bug_b, pair.bug_a)):
            eligible = eligible_by_cluster[membership[anchor]]
            if not eligible:
                raise SplitError(f"no eligible triplet negatives for anchor {anchor!r}")
            negative = eligible[int(rng.integers(len(eligible)))]
            triplets.append(TripletExample(anchor, positive, negative))

    manifest.triplets = triplets
    return triplets


def generate_retrieval_groups(
    manifest: SplitManifest,
    cluster_set: ClusterSet,
    split: str,
) -> list[RetrievalGroup]:
    """One group per clustered bug of the split: query plus its peers."""
    groups = [
        RetrievalGroup(query=m, relevant=tuple(x for x in c.members if x != m))
        for c in manifest.clusters_in(cluster_set, split)
        for m in c.members
    ]
    manifest.groups[split] = groups
    return groups


def build_manifest(
    cluster_set: ClusterSet,
    ratios: tuple[float, float, float] = DEFAULT_RATIOS,
    seed: int = 0,
    target_dup_ratio: float = DEFAULT_TARGET_DUP_RATIO,
    caps: dict[str, int | None] | None = None,
) -> SplitManifest:
    """Run every split stage: assignment, pairs, triplets, groups."""
    manifest = split_clusters(cluster_set, ratios, seed, target_dup_ratio, caps)
    generate_pairs(manifest, cluster_set)
    generate_triplets(manifest, cluster_set)
    for split in SPLITS:
        generate_retrieval_groups(manifest, cluster_set, split)
    return manifest


def split_stats(manifest: SplitManifest) -> dict[str, dict]:
    """Per-split pair counts and achieved duplicate ratio."""
    stats = {}
    for split, pairs in manifest.pairs.items():
        dup = sum(1 for p in pairs if p.duplicate)
        nondup = len(pairs) - dup
        total = dup + nondup
        stats[split] = {
            "dup_pairs": dup,
            "nondup_pairs": nondup,
            "dup_ratio": dup / total if total else 0.0,
        }
    return stats


def manifest_to_json(manifest: SplitManifest) -> dict:
    return {
        "seed": manifest.seed,
        "ratios": list(manifest.ratios),
        "target_dup_ratio": manifest.target_dup_ratio,
        "caps": manifest.caps,
        "cluster_assignment": {str(k): v for k, v in manifest.cluster_assignment.items()},
        "independent_assignment": manifest.independent_assignment,
        "pairs": {
            split: [[p.bug_a, p.bug_b, int(p.duplicate)] for p in pairs]
            for split, pairs in manifest.pairs.items()
        },
        "triplets": [[t.anchor, t.positive, t.negative] for t in manifest.triplets],
        "groups": {
            split: [[g.query, list(g.relevant)] for g in groups]
            for split, groups in manifest.groups.items()
        },
        "stats": split_stats(manifest),
    }


def manifest_from_json(payload: dict) -> SplitManifest:
    manifest = SplitManifest(
        seed=payload["seed"],
        ratios=tuple(payload["ratios"]),
        target_dup_ratio=payload["target_dup_ratio"],
        caps={k: v for k, v in payload["caps"].items()},
        cluster_assignment={int(k): v for k, v in payload["cluster_assignment"].items()},
        independent_assignment=dict(payload["independent_assignment"]),
    )
    manifest.pairs = {
        split: [LabeledPair(a, b, bool(d)) for a, b, d in pairs]
        for split, pairs in payload.get("pairs", {}).items()
    }
    manifest.triplets = [TripletExample(a, p, n) for a, p, n in payload.get("triplets", [])]
    manifest.groups = {
        split: [RetrievalGroup(q, tuple(rel)) for q, rel in groups]
        for split, groups in payload.get("groups", {}).items()
    }
    return manifest


def save_manifest(manifest: SplitManifest, path: str | Path, extra: dict | None = None) -> None:
    payload = manifest_to_json(manifest)
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> SplitManifest:
    return manifest_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
