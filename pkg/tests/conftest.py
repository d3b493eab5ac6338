from __future__ import annotations

import socket
from importlib import resources
from pathlib import Path

import pytest

from tmf.attack_kb import KnowledgeBase, import_stix_bundle
from tmf.dfd import DfdGraph, load_service_package, parse_dfd_file, to_graph


def data_path(name: str) -> Path:
    return Path(str(resources.files("tmf.data").joinpath(name)))


@pytest.fixture(scope="session")
def sample_bundle_path() -> Path:
    return data_path("attack_sample_bundle.json")


@pytest.fixture(scope="session")
def kb(sample_bundle_path) -> KnowledgeBase:
    return import_stix_bundle(sample_bundle_path)


@pytest.fixture(scope="session")
def purdue_graph() -> DfdGraph:
    return parse_dfd_file(data_path("purdue.dfd"))


@pytest.fixture(scope="session")
def cvo03_graph() -> DfdGraph:
    return to_graph(load_service_package(data_path("cvo03_package.json")))


@pytest.fixture
def no_network(monkeypatch):
    """Fail the test if anything attempts to open a network connection."""

    def guard(self, *args, **kwargs):
        raise AssertionError(f"network access attempted in offline mode: {args}")

    monkeypatch.setattr(socket.socket, "connect", guard)
    monkeypatch.setattr(socket, "create_connection", guard)
