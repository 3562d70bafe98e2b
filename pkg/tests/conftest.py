from __future__ import annotations

import ipaddress
import socket
import time
from pathlib import Path

import pytest

from ragnet.corpus import ChunkingConfig, Gazetteer, TokenizerConfig, ingest_documents
from ragnet.eval import load_questions
from ragnet.index import build_index

FIXTURES = Path(__file__).parent / "fixtures"
GOV = FIXTURES / "gov"
OVERDELETE = FIXTURES / "overdelete"

GOV_CHUNKING = ChunkingConfig(target_tokens=80, overlap_tokens=0, boundary_mode="paragraph")
CHUNK_TOKENS = 72  # every fixture paragraph is padded to this size

SESSION_START = time.perf_counter()
# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
# non-loopback connection attempts seen by the network guard
EXTERNAL_CONNECTS: list = []

_real_connect = socket.socket.connect


def _is_loopback(address) -> bool:
    if isinstance(address, (str, bytes)):  # unix socket path
        return True
    host = address[0]
    if host == "localhost":
        return True
    try:
        return ipaddress.ip_address(host).is_loopback
    except ValueError:
        return False


def _guarded_connect(self, address):
    if not _is_loopback(address):
        EXTERNAL_CONNECTS.append(address)
        raise OSError(f"network access blocked in tests: {address!r}")
    return _real_connect(self, address)


def pytest_configure(config):
    socket.socket.connect = _guarded_connect


def pytest_collection_modifyitems(config, items):
    # the hermeticity criterion measures the whole session, so it runs last
    last = [i for i in items if i.get_closest_marker("session_last")]
    items[:] = [i for i in items if i not in last] + last


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def gazetteer():
    return Gazetteer.from_file(GOV / "gazetteer.txt")


@pytest.fixture(scope="session")
def gov_store(gazetteer):
    return ingest_documents([GOV / "corpus"], GOV_CHUNKING, TokenizerConfig(), gazetteer)


@pytest.fixture(scope="session")
def gov_index(gov_store):
    return build_index(gov_store)


@pytest.fixture(scope="session")
def gov_questions(gov_store):
    return load_questions(GOV / "questions.jsonl", gov_store)


@pytest.fixture(scope="session")
def drift_questions(gov_store):
    return load_questions(GOV / "drift_questions.jsonl", gov_store)


@pytest.fixture(scope="session")
def od_store(gazetteer):
    return ingest_documents([OVERDELETE / "corpus"], ChunkingConfig(2000, 0, "paragraph"), TokenizerConfig(), gazetteer)


@pytest.fixture(scope="session")
def od_index(od_store):
    return build_index(od_store)
