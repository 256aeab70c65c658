"""Pair classification: decide duplicate / non-duplicate for two reports.

Three interchangeable backends share the ``classify`` / ``classify_batch``
interface the cascade expects:

* ``LogisticClassifier`` - logistic regression over hand-built pair
  features, trained with binary cross-entropy; the shipped default.
* ``SimilarityClassifier`` - fixed threshold on whole-text cosine.
* ``OracleClassifier`` - ground-truth cluster lookup, used only to
  verify pipeline plumbing, never for reported metrics.

Every classification decision increments the ledger's pair counter; the
per-report vectors a backend caches internally are its own business and
are deliberately not ledgered as embedding calls.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import BugReport, clean
from .dup_graph import ClusterSet
from .embedder import TrainingError
from .ledger import CostLedger
from .seeding import substream_rng

_CLAMP = 1e-12
_ZERO_NORM = 1e-12


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class PairFeatures:
    """Symmetric similarity features of one report pair."""

    cosine_all: float
    cosine_title: float
    cosine_description: float
    euclidean: float
    token_jaccard: float

    def __post_init__(self):
        values = (
            self.cosine_all,
            self.cosine_title,
            self.cosine_description,
            self.euclidean,
            self.token_jaccard,
        )
        if not all(math.isfinite(v) for v in values):
            raise FeatureError(f"non-finite pair features: {values}")
        if not 0.0 <= self.token_jaccard <= 1.0:
            raise FeatureError(f"jaccard out of range: {self.token_jaccard}")

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.cosine_all,
                self.cosine_title,
                self.cosine_description,
                self.euclidean,
                self.token_jaccard,
            ]
        )


FEATURE_COUNT = 5


def _safe_cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < _ZERO_NORM or nv < _ZERO_NORM:
        return 0.0
    return float(u @ v / (nu * nv))


@dataclass
class _CacheEntry:
    vec_all: np.ndarray
    vec_title: np.ndarray
    vec_description: np.ndarray
    tokens: frozenset[str]


class PairFeaturizer:
    """Builds PairFeatures, caching per-report vectors and token sets.

    The cache makes repeated pairings of the same bugs cheap (the
    scenario runner pairs each query with many candidates).
    """

    def __init__(self, embedder):
        self.embedder = embedder
        self._cache: dict[str, _CacheEntry] = {}

    def warm(self, reports: Sequence[BugReport]) -> None:
        """Embed all missing reports in three batched calls."""
        missing = [r for r in reports if r.bug_id not in self._cache]
        if not missing:
            return
        all_vecs = self.embedder.embed_texts([r.clean_text for r in missing])
        title_vecs = self.embedder.embed_texts([clean(r.title) for r in missing])
        desc_vecs = self.embedder.embed_texts([clean(r.description) for r in missing])
        for i, r in enumerate(missing):
            self._cache[r.bug_id] = _CacheEntry(
                vec_all=all_vecs[i],
                vec_title=title_vecs[i],
                vec_description=desc_vecs[i],
                tokens=frozenset(r.clean_text.split()),
            )

    def _entry(self, report: BugReport) -> _CacheEntry:
        if report.bug_id not in self._cache:
            self.warm([report])
        return self._cache[report.bug_id]

    def features(self, a: BugReport, b: BugReport) -> PairFeatures:
        if not a.clean_text and not b.clean_text:
            raise FeatureError(f"both reports empty after cleaning: {a.bug_id}, {b.bug_id}")
        ea, eb = self._entry(a), self._entry(b)
        union = len(ea.tokens | eb.tokens)
        return PairFeatures(
            cosine_all=_safe_cosine(ea.vec_all, eb.vec_all),
            cosine_title=_safe_cosine(ea.vec_title, eb.vec_title),
            cosine_description=_safe_cosine(ea.vec_description, eb.vec_description),
            euclidean=float(np.linalg.norm(ea.vec_all - eb.vec_all)),
            token_jaccard=len(ea.tokens & eb.tokens) / union if union else 0.0,
        )

    def cosine_all_batch(self, pairs: Sequence[tuple[BugReport, BugReport]]) -> np.ndarray:
        """Whole-text cosine for many pairs at once (cached vectors)."""
        self.warm([r for pair in pairs for r in pair])
        left = np.stack([self._cache[a.bug_id].vec_all for a, _ in pairs])
        right = np.stack([self._cache[b.bug_id].vec_all for _, b in pairs])
        ln = np.linalg.norm(left, axis=1)
        rn = np.linalg.norm(right, axis=1)
        denom = ln * rn
        valid = denom > _ZERO_NORM
        return np.where(valid, np.einsum("ij,ij->i", left, right) / np.where(valid, denom, 1.0), 0.0)


def ce_loss(y: int, p: float) -> float:
    """Binary cross-entropy with probability clamped to [1e-12, 1-1e-12]."""
    p = min(max(p, _CLAMP), 1.0 - _CLAMP)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class ClassifierTrainConfig:
    learning_rate: float = 0.5
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    threshold_step: float = 0.01

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "threshold_step": self.threshold_step,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ClassifierTrainConfig":
        return cls(**payload)


@dataclass(frozen=True, eq=False)
class LogisticPairModel:
    """Logistic regression over PairFeatures; weights[-1] is the bias."""

    weights: np.ndarray
    threshold: float = 0.5
    train_config: ClassifierTrainConfig = ClassifierTrainConfig()
    loss_curve: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.weights.shape != (FEATURE_COUNT + 1,):
            raise ValueError(f"expected {FEATURE_COUNT + 1} weights, got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite model weights")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0,1), got {self.threshold}")

    def predict_proba(self, feature_matrix: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(feature_matrix)
        z = x @ self.weights[:-1] + self.weights[-1]
        return _sigmoid(z)


def _feature_matrix(featurizer: PairFeaturizer, pairs) -> tuple[np.ndarray, np.ndarray]:
    featurizer.warm([r for a, b, _ in pairs for r in (a, b)])
    x = np.stack([featurizer.features(a, b).as_array() for a, b, _ in pairs])
    y = np.array([1.0 if dup else 0.0 for _, _, dup in pairs])
    return x, y


def train_classifier(
    train_pairs: Sequence[tuple[BugReport, BugReport, bool]],
    embedder,
    train_config: ClassifierTrainConfig = ClassifierTrainConfig(),
    dev_pairs: Sequence[tuple[BugReport, BugReport, bool]] | None = None,
) -> LogisticPairModel:
    """Fit by mini-batch gradient descent on mean CE loss.

    Weights start at zero (the problem is convex); the seed only drives
    epoch shuffling. When dev pairs are given the decision threshold is
    swept on them to maximize F1, otherwise it stays at 0.5.
    """
    if not train_pairs:
        raise ValueError("training requires at least one labeled pair")
    cfg = train_config
    featurizer = PairFeaturizer(embedder)
    x, y = _feature_matrix(featurizer, train_pairs)

    weights = np.zeros(FEATURE_COUNT + 1)
    curve = [_mean_ce(weights, x, y)]
    order_rng = substream_rng(cfg.seed, "classifier.order")
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(y))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            xb, yb = x[batch], y[batch]
            p = _sigmoid(xb @ weights[:-1] + weights[-1])
            err = p - yb
            grad = np.concatenate([xb.T @ err, [err.sum()]]) / len(batch)
            weights = weights - cfg.learning_rate * grad
        loss = _mean_ce(weights, x, y)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite CE loss after epoch {epoch + 1}")
        curve.append(loss)

    model = LogisticPairModel(weights=weights, train_config=cfg, loss_curve=tuple(curve))
    if dev_pairs:
        dev_x, dev_y = _feature_matrix(featurizer, dev_pairs)
        threshold = tune_threshold(model.predict_proba(dev_x), dev_y, cfg.threshold_step)
        model = LogisticPairModel(
            weights=weights, threshold=threshold, train_config=cfg, loss_curve=tuple(curve)
        )
    return model


def _mean_ce(weights: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(_sigmoid(x @ weights[:-1] + weights[-1]), _CLAMP, 1.0 - _CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def tune_threshold(probabilities: np.ndarray, labels: np.ndarray, step: float = 0.01) -> float:
    """Grid-sweep the threshold maximizing F1; lowest argmax wins ties."""
    best_t, best_f1 = 0.5, -1.0
    grid = np.arange(step, 1.0, step)
    for t in grid:
        pred = probabilities >= t
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        fn = int(np.sum(~pred & (labels == 1)))
        denom_p, denom_r = tp + fp, tp + fn
        precision = tp / denom_p if denom_p else 0.0
        recall = tp / denom_r if denom_r else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        if f1 > best_f1 + 1e-15:
            best_t, best_f1 = float(t), f1
    return best_t


class LogisticClassifier:
    """Trained-model backend; duplicate iff probability >= threshold."""

    def __init__(self, model: LogisticPairModel, featurizer: PairFeaturizer):
        self.model = model
        self.featurizer = featurizer

    def classify(
        self, a: BugReport, b: BugReport, ledger: CostLedger | None = None
    ) -> tuple[float, bool]:
        p = float(self.model.predict_proba(self.featurizer.features(a, b).as_array())[0])
        if ledger is not None:
            ledger.count_classifications(1)
        return p, p >= self.model.threshold

    def classify_batch(
        self, pairs: Sequence[tuple[BugReport, BugReport]], ledger: CostLedger | None = None
    ) -> list[tuple[float, bool]]:
        if not pairs:
            return []
        self.featurizer.warm([r for pair in pairs for r in pair])
        # Each pair is featurized jointly; this loop is the honest cost
        # of a cross-encoder-style scorer.
        x = np.stack([self.featurizer.features(a, b).as_array() for a, b in pairs])
        probs = self.model.predict_proba(x)
        if ledger is not None:
            ledger.count_classifications(len(pairs))
        return [(float(p), bool(p >= self.model.threshold)) for p in probs]


class SimilarityClassifier:
    """Fixed-threshold rule on whole-text cosine; no training."""

    def __init__(self, featurizer: PairFeaturizer, similarity_threshold: float = 0.5):
        self.featurizer = featurizer
        self.similarity_threshold = similarity_threshold

    @property
    def threshold(self) -> float:
        # Probability-scale equivalent of the cosine threshold.
        return (self.similarity_threshold + 1.0) / 2.0

    def classify(
        self, a: BugReport, b: BugReport, ledger: CostLedger | None = None
    ) -> tuple[float, bool]:
        sim = self.featurizer.features(a, b).cosine_all
        if ledger is not None:
            ledger.count_classifications(1)
        return (sim + 1.0) / 2.0, sim >= self.similarity_threshold

    def classify_batch(
        self, pairs: Sequence[tuple[BugReport, BugReport]], ledger: CostLedger | None = None
    ) -> list[tuple[float, bool]]:
        if not pairs:
            return []
        sims = self.featurizer.cosine_all_batch(pairs)
        if ledger is not None:
            ledger.count_classifications(len(pairs))
        return [(float((s + 1.0) / 2.0), bool(s >= self.similarity_threshold)) for s in sims]


class OracleClassifier:
    """Cluster-membership lookup. Pipeline verification only."""

    def __init__(self, cluster_set: ClusterSet):
        self.cluster_set = cluster_set
        self.threshold = 0.5

    def classify(
        self, a: BugReport, b: BugReport, ledger: CostLedger | None = None
    ) -> tuple[float, bool]:
        dup = self.cluster_set.same_cluster(a.bug_id, b.bug_id)
        if ledger is not None:
            ledger.count_classifications(1)
        return (1.0 if dup else 0.0), dup

    def classify_batch(
        self, pairs: Sequence[tuple[BugReport, BugReport]], ledger: CostLedger | None = None
    ) -> list[tuple[float, bool]]:
        out = [
            ((1.0 if self.cluster_set.same_cluster(a.bug_id, b.bug_id) else 0.0),
             self.cluster_set.same_cluster(a.bug_id, b.bug_id))
            for a, b in pairs
        ]
        if ledger is not None:
            ledger.count_classifications(len(pairs))
        return out


def save_classifier(model: LogisticPairModel, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "weights": list(map(float, model.weights)),
        "threshold": model.threshold,
        "train_config": model.train_config.to_json(),
        "loss_curve": list(model.loss_curve),
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, sort_keys=True, default=str) + "\n", encoding="utf-8")


def load_classifier(path: str | Path) -> LogisticPairModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return LogisticPairModel(
        weights=np.array(payload["weights"]),
        threshold=payload["threshold"],
        train_config=ClassifierTrainConfig.from_json(payload["train_config"]),
        loss_curve=tuple(payload["loss_curve"]),
    )
