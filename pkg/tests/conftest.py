import os

import numpy as np
import pytest

from s2m.diffusion import default_schedule

_ACCEPTANCE: list[tuple[str, str, float]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): exit criterion, reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        _ACCEPTANCE.append((marker.args[0], status, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, dur in _ACCEPTANCE:
        terminalreporter.write_line(f"{status}  {name}  ({dur:.1f} s)")


@pytest.fixture(scope="session")
def schedule():
    return default_schedule()


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path_factory, monkeypatch):
    # keep toy corpora written by tests out of the user cache, but reuse a
    # pre-trained toy checkpoint if one is there
    if "S2M_TOY_CHECKPOINT" not in os.environ:
        from s2m.corpus import toy_checkpoint_path

        monkeypatch.setenv("S2M_TOY_CHECKPOINT", str(toy_checkpoint_path()))
    monkeypatch.setenv("S2M_CACHE", str(tmp_path_factory.getbasetemp() / "s2m-cache"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def toy_denoiser():
    """The pinned toy denoiser; trained (or resumed) on first use if needed."""
    from s2m.corpus import toy_checkpoint_path, train_toy_denoiser

    path = os.environ.get("S2M_TOY_CHECKPOINT") or str(toy_checkpoint_path())
    return train_toy_denoiser(path=path)
