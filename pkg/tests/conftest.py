from __future__ import annotations

from dataclasses import dataclass

import pytest

from fullband import codec as C
from fullband import prior as P
from fullband import toydata
from fullband.planner import build_db

from helpers import train_toy_codec, train_toy_prior


@dataclass
class ToyModels:
    corpus: list
    codec: C.Codec
    prior: P.Prior


@pytest.fixture(scope="session")
def toy_codec():
    return train_toy_codec()


@pytest.fixture(scope="session")
def toy_models(toy_codec):
    corpus, prior = train_toy_prior(toy_codec)
    return ToyModels(corpus, toy_codec, prior)


@pytest.fixture(scope="session")
def ablation_models(toy_codec):
    """A prior trained long enough on enough pieces that it leans on the context."""
    corpus, prior = train_toy_prior(toy_codec, n_pieces=200, steps=2000)
    return ToyModels(corpus, toy_codec, prior)


@pytest.fixture(scope="session")
def toy_db():
    sources = toydata.phrase_sources(12, seed=1)
    return build_db((f"song{i:02d}", lead, accomp) for i, (lead, accomp) in enumerate(sources))


_criteria: list[tuple[str, str, float]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): an acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria.append((marker.args[0], report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, seconds in _criteria:
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}  ({seconds:.1f}s)")
