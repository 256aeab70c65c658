"""Text embedding backends and the triplet-loss projection trainer.

Two built-in backends share one interface (``embed_texts``): a hashed
TF-IDF bag-of-tokens baseline, and that baseline composed with a linear
projection fine-tuned by triplet loss. Both are deterministic; the
remote HTTP backend lives in ``remote``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .seeding import substream_rng

DEFAULT_DIM = 1024
DEFAULT_PROJECTION_DIM = 256
DEFAULT_MARGIN = 0.2

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_ZERO_NORM = 1e-12


class ZeroVectorError(ValueError):
    """Cosine similarity is undefined for a zero vector."""


class NotFittedError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Raised when projection training produces a non-finite loss."""


def fnv1a64(token: str) -> int:
    """FNV-1a 64-bit hash; the bucket function is fixed for reproducibility."""
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    normalized: bool

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def _as_array(v) -> np.ndarray:
    return np.asarray(getattr(v, "values", v), dtype=np.float64)


def cosine(u, v) -> float:
    """Cosine similarity of two vectors; raises on a zero vector.

    Callers that rank candidates catch the zero case up front and score
    it as negative infinity instead of calling in.
    """
    a, b = _as_array(u), _as_array(v)
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _ZERO_NORM or nb < _ZERO_NORM:
        raise ZeroVectorError("cosine similarity is undefined for a zero vector")
    return float(a @ b / (na * nb))


def triplet_loss(e_a, e_p, e_n, margin: float = DEFAULT_MARGIN) -> float:
    """max(d(a,p) - d(a,n) + margin, 0) with Euclidean d."""
    a, p, n = _as_array(e_a), _as_array(e_p), _as_array(e_n)
    d_ap = float(np.linalg.norm(a - p))
    d_an = float(np.linalg.norm(a - n))
    return max(d_ap - d_an + margin, 0.0)


def l2_normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-normalize; all-zero rows are left as zeros."""
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    safe = np.where(norms < _ZERO_NORM, 1.0, norms)
    return matrix / safe


@dataclass(frozen=True)
class TfidfHashEmbedder:
    """Hashed TF-IDF embedder, fitted on train-split texts only.

    Tokens (whitespace-split, already cleaned) are bucketed by FNV-1a
    64-bit hash mod ``dim``; each contributes tf * idf to its bucket and
    the vector is L2-normalized. IDF uses the smoothed form
    ln((1+N)/(1+df)) + 1 so unseen tokens still carry weight. Fitted
    instances are immutable and safe to share across threads.
    """

    dim: int
    doc_count: int
    df: Mapping[str, int]

    @classmethod
    def fit(cls, train_texts: Sequence[str], dim: int = DEFAULT_DIM) -> "TfidfHashEmbedder":
        if dim < 1:
            raise ValueError("dim must be positive")
        df: dict[str, int] = {}
        for text in train_texts:
            for token in set(text.split()):
                df[token] = df.get(token, 0) + 1
        return cls(dim=dim, doc_count=len(train_texts), df=MappingProxyType(df))

    def idf(self, token: str) -> float:
        return math.log((1 + self.doc_count) / (1 + self.df.get(token, 0))) + 1.0

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            tf: dict[str, int] = {}
            for token in text.split():
                tf[token] = tf.get(token, 0) + 1
            for token, count in tf.items():
                out[i, fnv1a64(token) % self.dim] += count * self.idf(token)
        return l2_normalize_rows(out)

    def embed(self, text: str) -> EmbeddingVector:
        row = self.embed_texts([text])[0]
        return EmbeddingVector(values=row, normalized=bool(np.linalg.norm(row) > 0.5))

    def to_json(self) -> dict:
        return {"dim": self.dim, "doc_count": self.doc_count, "df": dict(self.df)}

    @classmethod
    def from_json(cls, payload: dict) -> "TfidfHashEmbedder":
        return cls(
            dim=payload["dim"],
            doc_count=payload["doc_count"],
            df=MappingProxyType(dict(payload["df"])),
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    dim_out: int = DEFAULT_PROJECTION_DIM
    margin: float = DEFAULT_MARGIN

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "dim_out": self.dim_out,
            "margin": self.margin,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        return cls(**payload)


@dataclass(frozen=True, eq=False)
class ProjectionModel:
    """Linear projection on top of a base embedder.

    Projected embeddings are base vectors times ``weights``, then
    re-normalized. ``loss_curve[0]`` is the mean triplet loss before any
    update; entry i is the full-pass mean after epoch i.
    """

    weights: np.ndarray
    margin: float
    train_config: TrainConfig
    loss_curve: tuple[float, ...] = field(default=())

    @property
    def dim_in(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim_out(self) -> int:
        return int(self.weights.shape[1])

    def project(self, base_vectors: np.ndarray) -> np.ndarray:
        return l2_normalize_rows(np.asarray(base_vectors) @ self.weights)


@dataclass(frozen=True)
class ProjectedEmbedder:
    base: TfidfHashEmbedder
    model: ProjectionModel

    @property
    def dim(self) -> int:
        return self.model.dim_out

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        return self.model.project(self.base.embed_texts(texts))

    def embed(self, text: str) -> EmbeddingVector:
        row = self.embed_texts([text])[0]
        return EmbeddingVector(values=row, normalized=bool(np.linalg.norm(row) > 0.5))


def initial_weights(dim_in: int, dim_out: int, seed: int) -> np.ndarray:
    """Seeded uniform init in [-a, a], a = sqrt(6 / (dim_in + dim_out))."""
    a = math.sqrt(6.0 / (dim_in + dim_out))
    rng = substream_rng(seed, "projection.init")
    return rng.uniform(-a, a, size=(dim_in, dim_out))


def _pass_losses(
    weights: np.ndarray, xa: np.ndarray, xp: np.ndarray, xn: np.ndarray, margin: float
) -> np.ndarray:
    ea = l2_normalize_rows(xa @ weights)
    ep = l2_normalize_rows(xp @ weights)
    en = l2_normalize_rows(xn @ weights)
    d_ap = np.linalg.norm(ea - ep, axis=1)
    d_an = np.linalg.norm(ea - en, axis=1)
    return np.maximum(d_ap - d_an + margin, 0.0)


def train_projection(
    triplets: Sequence[tuple[str, str, str]],
    base_embedder: TfidfHashEmbedder,
    train_config: TrainConfig = TrainConfig(),
) -> ProjectionModel:
    """Fit the projection by mini-batch gradient descent on triplet loss.

    ``triplets`` holds (anchor, positive, negative) texts. Base vectors
    are fixed during training, so each distinct text is embedded once up
    front. Deterministic per seed: init and epoch shuffles draw from
    named substreams of the config seed.
    """
    if not triplets:
        raise ValueError("training requires at least one triplet")
    cfg = train_config

    texts = sorted({t for tri in triplets for t in tri})
    index = {t: i for i, t in enumerate(texts)}
    base = base_embedder.embed_texts(texts)
    ia = np.array([index[a] for a, _, _ in triplets])
    ip = np.array([index[p] for _, p, _ in triplets])
    in_ = np.array([index[n] for _, _, n in triplets])

    weights = initial_weights(base_embedder.dim, cfg.dim_out, cfg.seed)
    curve = [float(np.mean(_pass_losses(weights, base[ia], base[ip], base[in_], cfg.margin)))]

    order_rng = substream_rng(cfg.seed, "projection.order")
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(triplets))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grad = _batch_gradient(
                weights, base[ia[batch]], base[ip[batch]], base[in_[batch]], cfg.margin
            )
            weights = weights - cfg.learning_rate * grad
        epoch_loss = float(np.mean(_pass_losses(weights, base[ia], base[ip], base[in_], cfg.margin)))
        if not math.isfinite(epoch_loss):
            raise TrainingError(
                f"non-finite loss {epoch_loss} after epoch {epoch + 1} "
                f"(lr={cfg.learning_rate}, batch_size={cfg.batch_size})"
            )
        curve.append(epoch_loss)

    return ProjectionModel(
        weights=weights, margin=cfg.margin, train_config=cfg, loss_curve=tuple(curve)
    )


def _batch_gradient(
    weights: np.ndarray, xa: np.ndarray, xp: np.ndarray, xn: np.ndarray, margin: float
) -> np.ndarray:
    """Mean gradient of the triplet loss w.r.t. the projection weights.

    The chain runs through the row re-normalization: for z = xW and
    e = z/|z|, dL/dz = (g - (g.e)e)/|z| where g = dL/de.
    """
    za, zp, zn = xa @ weights, xp @ weights, xn @ weights
    ea, ep, en = l2_normalize_rows(za), l2_normalize_rows(zp), l2_normalize_rows(zn)

    diff_ap = ea - ep
    diff_an = ea - en
    d_ap = np.linalg.norm(diff_ap, axis=1, keepdims=True)
    d_an = np.linalg.norm(diff_an, axis=1, keepdims=True)
    active = ((d_ap - d_an + margin) > 0).astype(np.float64)

    # Unit direction of each distance term; zero-distance pairs contribute nothing.
    u_ap = np.where(d_ap < _ZERO_NORM, 0.0, diff_ap / np.where(d_ap < _ZERO_NORM, 1.0, d_ap))
    u_an = np.where(d_an < _ZERO_NORM, 0.0, diff_an / np.where(d_an < _ZERO_NORM, 1.0, d_an))

    g_ea = active * (u_ap - u_an)
    g_ep = active * (-u_ap)
    g_en = active * u_an

    grad = (
        xa.T @ _through_normalization(g_ea, za, ea)
        + xp.T @ _through_normalization(g_ep, zp, ep)
        + xn.T @ _through_normalization(g_en, zn, en)
    )
    return grad / xa.shape[0]


def _through_normalization(g: np.ndarray, z: np.ndarray, e: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    safe = np.where(norms < _ZERO_NORM, 1.0, norms)
    out = (g - np.sum(g * e, axis=1, keepdims=True) * e) / safe
    return np.where(norms < _ZERO_NORM, 0.0, out)


def save_projection(model: ProjectionModel, path: str | Path, extra: dict | None = None) -> None:
    """Persist weights with dims, seed, margin, and a content checksum."""
    raw = np.ascontiguousarray(model.weights, dtype=np.float64).tobytes()
    payload = {
        "dim_in": model.dim_in,
        "dim_out": model.dim_out,
        "margin": model.margin,
        "train_config": model.train_config.to_json(),
        "loss_curve": list(model.loss_curve),
        "weights_b64": base64.b64encode(raw).decode("ascii"),
        "weights_sha256": hashlib.sha256(raw).hexdigest(),
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, sort_keys=True, default=str) + "\n", encoding="utf-8")


def load_projection(path: str | Path) -> ProjectionModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    raw = base64.b64decode(payload["weights_b64"])
    if hashlib.sha256(raw).hexdigest() != payload["weights_sha256"]:
        raise ValueError(f"projection file {path} is corrupt: checksum mismatch")
    weights = np.frombuffer(raw, dtype=np.float64).reshape(
        payload["dim_in"], payload["dim_out"]
    )
    return ProjectionModel(
        weights=weights.copy(),
        margin=payload["margin"],
        train_config=TrainConfig.from_json(payload["train_config"]),
        loss_curve=tuple(payload["loss_curve"]),
    )
