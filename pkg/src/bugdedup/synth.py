"""Seeded synthetic corpora with planted duplicate clusters.

Every cluster gets a topic (vocabulary shared across many clusters) and
a few signature tokens of its own; members paraphrase each other by
sampling different topic/noise words around the shared signature. That
mix is what makes the corpora useful for evaluation: topic overlap
confuses a pure bag-of-words ranker, while cluster signatures keep the
ground truth learnable. Token shapes are plain lowercase alphanumerics
so text cleaning passes them through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import BugReport, Corpus, build_corpus
from .seeding import substream_rng


@dataclass(frozen=True)
class SynthConfig:
    n_clusters: int = 50
    mean_size: float = 3.0
    n_independents: int | None = None  # default: half the cluster count
    n_topics: int = 5
    topic_words: int = 8
    signature_words: int = 4
    noise_vocab: int = 200
    description_words: int = 20
    topic_repeat: int = 1
    signature_repeat: int = 2
    seed: int = 7

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.mean_size < 2:
            raise ValueError("mean_size must be >= 2 (clusters need 2+ members)")
        if self.n_topics < 1 or self.topic_words < 1 or self.signature_words < 1:
            raise ValueError("vocabulary sizes must be positive")

    @property
    def independents(self) -> int:
        return self.n_clusters // 2 if self.n_independents is None else self.n_independents


def synth_corpus(config: SynthConfig = SynthConfig()) -> Corpus:
    """Deterministic planted corpus; same config, same bytes."""
    rng = substream_rng(config.seed, "synth")
    topic_pools = [
        [f"t{t}w{i}" for i in range(config.topic_words)] for t in range(config.n_topics)
    ]
    noise_pool = [f"noise{i}" for i in range(config.noise_vocab)]

    reports: list[BugReport] = []
    serial = 0

    def next_id() -> str:
        nonlocal serial
        serial += 1
        return f"b{serial:06d}"

    for c in range(config.n_clusters):
        topic = topic_pools[c % config.n_topics]
        signature = [f"c{c}s{j}" for j in range(config.signature_words)]
        size = 2 + int(rng.poisson(max(config.mean_size - 2.0, 0.0)))
        anchor_id: str | None = None
        for _ in range(size):
            bug_id = next_id()
            title = f"{signature[0]} {topic[int(rng.integers(len(topic)))]}"
            reports.append(
                BugReport(
                    bug_id=bug_id,
                    title=title,
                    description=_description(rng, config, topic, signature, noise_pool),
                    dup_of=anchor_id,
                )
            )
            if anchor_id is None:
                anchor_id = bug_id

    for i in range(config.independents):
        topic = topic_pools[int(rng.integers(config.n_topics))]
        own = [f"i{i}u{j}" for j in range(config.signature_words)]
        reports.append(
            BugReport(
                bug_id=next_id(),
                title=f"{own[0]} {topic[int(rng.integers(len(topic)))]}",
                description=_description(rng, config, topic, own, noise_pool),
                dup_of=None,
            )
        )

    return build_corpus(reports)


def _description(rng, config: SynthConfig, topic, signature, noise_pool) -> str:
    words: list[str] = []
    for _ in range(config.description_words):
        words.extend([topic[int(rng.integers(len(topic)))]] * config.topic_repeat)
    for sig in signature:
        words.extend([sig] * config.signature_repeat)
    for _ in range(3):
        words.append(noise_pool[int(rng.integers(len(noise_pool)))])
    return " ".join(words)
