import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synth16():
    from flamegaze.data import synth_generate

    return synth_generate(16, seed=3)



def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion reported in the summary")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if call.when == "call" or (call.when == "setup" and rep.failed):
        item.stash.setdefault(_OUTCOME, []).append(rep)
    return rep


_OUTCOME = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for item in getattr(config, "_criterion_items", []):
        mark = item.get_closest_marker("criterion")
        reports = item.stash.get(_OUTCOME, [])
        if not reports:
            status = "NOT RUN"
        else:
            status = "PASS" if all(r.passed for r in reports) else "FAIL"
        line = f"criterion {mark.args[0]:2d}: {status}  {mark.args[1]}"
        detail = getattr(item.module, "DETAILS", {}).get(mark.args[0])
        if detail:
            line += f" [{detail}]"
        lines.append((mark.args[0], line))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)


def pytest_collection_finish(session):
    session.config._criterion_items = [i for i in session.items if i.get_closest_marker("criterion")]
