"""HTTP clients for external embedding and pair-classification services.

Wire protocols (JSON over POST):

* embed:    {"texts": ["..."]}             -> {"dim": D, "vectors": [[...]]}
* classify: {"pairs": [["a", "b"], ...]}   -> {"probabilities": [...]}

Requests are batched per config and results re-assembled in order.
Every contract violation maps to a typed error so callers can tell a
flaky network from a broken service.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import requests

from .corpus import BugReport
from .ledger import CostLedger


class RemoteError(RuntimeError):
    pass


class RemoteTimeoutError(RemoteError):
    pass


class ServiceStatusError(RemoteError):
    """Service answered with a non-200 status."""


class MalformedResponseError(RemoteError):
    pass


class CountMismatchError(RemoteError):
    pass


class DimMismatchError(RemoteError):
    pass


class ProbabilityRangeError(RemoteError):
    pass


@dataclass(frozen=True)
class RemoteConfig:
    endpoint: str
    timeout_ms: int = 10000
    batch_size: int = 32
    retries: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


def _post_json(config: RemoteConfig, payload: dict) -> dict:
    last: Exception | None = None
    for _ in range(config.retries + 1):
        try:
            response = requests.post(
                config.endpoint, json=payload, timeout=config.timeout_ms / 1000.0
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            last = exc
            continue
        if response.status_code != 200:
            raise ServiceStatusError(
                f"{config.endpoint} answered {response.status_code}: {response.text[:200]}"
            )
        try:
            body = response.json()
        except ValueError as exc:
            raise MalformedResponseError(f"{config.endpoint} returned non-JSON body") from exc
        if not isinstance(body, dict):
            raise MalformedResponseError(f"{config.endpoint} returned {type(body).__name__}, expected object")
        return body
    raise RemoteTimeoutError(
        f"{config.endpoint} unreachable after {config.retries + 1} attempt(s): {last}"
    ) from last


class RemoteEmbedder:
    """Order-preserving batched client for an embedding service.

    The vector dimension is whatever the service declares on the first
    batch; later batches must agree or the whole call fails.
    """

    def __init__(self, config: RemoteConfig):
        self.config = config
        self._dim: int | None = None

    @property
    def dim(self) -> int | None:
        return self._dim

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self._dim or 0))
        rows: list[list[float]] = []
        for start in range(0, len(texts), self.config.batch_size):
            batch = list(texts[start : start + self.config.batch_size])
            rows.extend(self._embed_batch(batch))
        return np.array(rows, dtype=np.float64)

    def _embed_batch(self, batch: list[str]) -> list[list[float]]:
        body = _post_json(self.config, {"texts": batch})
        if "dim" not in body or "vectors" not in body:
            raise MalformedResponseError("embed response missing 'dim' or 'vectors'")
        dim, vectors = body["dim"], body["vectors"]
        if not isinstance(dim, int) or dim < 1 or not isinstance(vectors, list):
            raise MalformedResponseError(f"embed response malformed: dim={dim!r}")
        if len(vectors) != len(batch):
            raise CountMismatchError(
                f"embed service returned {len(vectors)} vectors for {len(batch)} texts"
            )
        if self._dim is None:
            self._dim = dim
        elif dim != self._dim:
            raise DimMismatchError(f"service changed dim from {self._dim} to {dim} across batches")
        for i, vec in enumerate(vectors):
            if not isinstance(vec, list) or len(vec) != dim:
                raise DimMismatchError(
                    f"vector {i} has length {len(vec) if isinstance(vec, list) else '?'}, expected {dim}"
                )
            if not all(isinstance(x, (int, float)) and np.isfinite(x) for x in vec):
                raise MalformedResponseError(f"vector {i} contains non-finite or non-numeric values")
        return vectors


class RemoteClassifier:
    """Batched client for a pair-probability service; also usable as a
    cascade backend (duplicate iff probability >= threshold)."""

    def __init__(self, config: RemoteConfig, threshold: float = 0.5):
        if not 0.0 < threshold < 1.0:
            raise ValueError("threshold must lie in (0,1)")
        self.config = config
        self.threshold = threshold

    def classify_texts(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        if not pairs:
            return []
        probs: list[float] = []
        for start in range(0, len(pairs), self.config.batch_size):
            batch = [list(p) for p in pairs[start : start + self.config.batch_size]]
            probs.extend(self._classify_batch(batch))
        return probs

    def _classify_batch(self, batch: list[list[str]]) -> list[float]:
        body = _post_json(self.config, {"pairs": batch})
        if "probabilities" not in body or not isinstance(body["probabilities"], list):
            raise MalformedResponseError("classify response missing 'probabilities'")
        probs = body["probabilities"]
        if len(probs) != len(batch):
            raise CountMismatchError(
                f"classify service returned {len(probs)} probabilities for {len(batch)} pairs"
            )
        for i, p in enumerate(probs):
            if not isinstance(p, (int, float)) or not np.isfinite(p):
                raise MalformedResponseError(f"probability {i} is not a finite number: {p!r}")
            if not 0.0 <= p <= 1.0:
                raise ProbabilityRangeError(f"probability {i} out of [0,1]: {p}")
        return [float(p) for p in probs]

    def classify(
        self, a: BugReport, b: BugReport, ledger: CostLedger | None = None
    ) -> tuple[float, bool]:
        return self.classify_batch([(a, b)], ledger)[0]

    def classify_batch(
        self, pairs: Sequence[tuple[BugReport, BugReport]], ledger: CostLedger | None = None
    ) -> list[tuple[float, bool]]:
        probs = self.classify_texts([(a.clean_text, b.clean_text) for a, b in pairs])
        if ledger is not None and pairs:
            ledger.count_classifications(len(pairs))
        return [(p, p >= self.threshold) for p in probs]
