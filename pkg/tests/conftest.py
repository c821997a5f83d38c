import os

import pytest
from hypothesis import HealthCheck, settings

from datasetagent import synth

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

CLASSES3 = ["cat", "dog", "bird"]


@pytest.fixture(scope="session")
def det_corpus(tmp_path_factory):
    """60 synthetic images over three classes; image #29 is an undecodable file."""
    root = tmp_path_factory.mktemp("det_corpus")
    return synth.make_corpus(root, CLASSES3, 20, corrupt=[29])


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_corpus")
    return synth.make_corpus(root, CLASSES3, 8, seed=5)


@pytest.fixture
def criterion(request):
    """Print one PASS/FAIL line for an acceptance criterion after the test runs."""
    lines = []

    def announce(number: int, title: str):
        lines.append((number, title))

    yield announce
    rep = getattr(request.node, "rep_call", None)
    status = "PASS" if rep is not None and rep.passed else "FAIL"
    capman = request.config.pluginmanager.getplugin("capturemanager")
    for number, title in lines:
        with capman.global_and_fixture_disabled():
            print(f"\nACCEPTANCE criterion {number} [{status}]: {title}")


@pytest.hookimpl(wrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep
