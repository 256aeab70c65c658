"""Shared test utilities: planted pipelines and a scriptable HTTP stub."""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from bugdedup.corpus import Corpus
from bugdedup.dup_graph import ClusterSet, build_clusters
from bugdedup.embedder import TfidfHashEmbedder
from bugdedup.splitter import SplitManifest, build_manifest
from bugdedup.synth import SynthConfig, synth_corpus


def planted_pipeline(
    n_clusters: int = 100,
    corpus_seed: int = 11,
    split_seed: int = 3,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    target_dup_ratio: float = 0.1564,
    **synth_kwargs,
) -> tuple[Corpus, ClusterSet, SplitManifest]:
    """Corpus, clusters, and a fully built manifest in one call."""
    corpus = synth_corpus(SynthConfig(n_clusters=n_clusters, seed=corpus_seed, **synth_kwargs))
    clusters = build_clusters(corpus)
    manifest = build_manifest(
        clusters, ratios=ratios, seed=split_seed, target_dup_ratio=target_dup_ratio
    )
    return corpus, clusters, manifest


def fit_train_embedder(corpus, clusters, manifest, dim: int = 256) -> TfidfHashEmbedder:
    texts = [corpus.by_id[b].clean_text for b in manifest.bugs_in(clusters, "train")]
    return TfidfHashEmbedder.fit(texts, dim=dim)


def reports_of(corpus, bug_ids):
    return [corpus.by_id[b] for b in bug_ids]


def resolve_pairs(corpus, labeled_pairs):
    return [(corpus.by_id[p.bug_a], corpus.by_id[p.bug_b], p.duplicate) for p in labeled_pairs]


# ------------------------------------------------------------- HTTP stub


def json_reply(payload: dict):
    """Script entry: answer 200 with this JSON body."""

    def handler(path, body):
        return 200, json.dumps(payload).encode("utf-8"), "application/json"

    return handler


def status_reply(code: int, text: str = "boom"):
    def handler(path, body):
        return code, text.encode("utf-8"), "text/plain"

    return handler


def raw_reply(raw: bytes, content_type: str = "application/json"):
    def handler(path, body):
        return 200, raw, content_type

    return handler


def sleep_reply(seconds: float, then=None):
    """Stall before answering; pair with a short client timeout."""

    def handler(path, body):
        time.sleep(seconds)
        inner = then or embed_reply(4)
        return inner(path, body)

    return handler


def embed_reply(dim: int):
    """Valid embedding response; vectors derive from text content so
    order preservation across batches is checkable."""

    def handler(path, body):
        vectors = [_text_vector(t, dim) for t in body.get("texts", [])]
        return 200, json.dumps({"dim": dim, "vectors": vectors}).encode("utf-8"), "application/json"

    return handler


def classify_reply(probability: float | None = None):
    """Valid classification response; default probability derives from
    the pair texts so results are distinguishable."""

    def handler(path, body):
        pairs = body.get("pairs", [])
        if probability is None:
            probs = [round((len(a) + len(b)) % 10 / 10.0, 6) for a, b in pairs]
        else:
            probs = [probability] * len(pairs)
        return 200, json.dumps({"probabilities": probs}).encode("utf-8"), "application/json"

    return handler


def _text_vector(text: str, dim: int) -> list[float]:
    seedval = sum(text.encode("utf-8")) or 1
    return [float((seedval * (i + 3)) % 17) + 1.0 for i in range(dim)]


class StubService:
    """In-process HTTP endpoint whose responses are scripted per request.

    ``script`` entries are handler callables consumed in order; once the
    script is exhausted the ``default`` handler answers. Every request
    body is recorded for assertions.
    """

    def __init__(self, default=None):
        self.requests: list[tuple[str, dict]] = []
        self.script: list = []
        self.default = default or embed_reply(4)
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length) if length else b""
                try:
                    body = json.loads(raw) if raw else {}
                except json.JSONDecodeError:
                    body = {}
                stub.requests.append((self.path, body))
                fn = stub.script.pop(0) if stub.script else stub.default
                status, payload, ctype = fn(self.path, body)
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self._server.server_address[1]}/"
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.02), daemon=True
        )
        self._thread.start()

    def close(self):
        self._server.shutdown()
        self._server.server_close()
