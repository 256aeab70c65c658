"""Shared fixtures: one standard planted pipeline plus an HTTP stub."""

from __future__ import annotations

import pytest

from helpers import StubService, fit_train_embedder, planted_pipeline


@pytest.fixture(scope="session")
def pipeline():
    """(corpus, clusters, manifest) on the standard 100-cluster corpus."""
    return planted_pipeline()


@pytest.fixture(scope="session")
def corpus(pipeline):
    return pipeline[0]


@pytest.fixture(scope="session")
def clusters(pipeline):
    return pipeline[1]


@pytest.fixture(scope="session")
def manifest(pipeline):
    return pipeline[2]


@pytest.fixture(scope="session")
def train_embedder(pipeline):
    return fit_train_embedder(*pipeline, dim=256)


@pytest.fixture
def stub_service():
    service = StubService()
    yield service
    service.close()
