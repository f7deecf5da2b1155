import pytest
import torch

from fmse.data import synth_corpus

CRITERIA = {
    1: "EDM coefficient identities",
    2: "EDM spot values at t=1",
    3: "oracle-objective zeroing and conversion identity",
    4: "sampler exactness and midpoint order",
    5: "transform round-trips",
    6: "SI-SDR contract",
    7: "gradient checks",
    8: "toy end-to-end enhancement",
    9: "published-number tooling (format only)",
    10: "determinism and checkpoint resume",
}

_outcomes: dict[int, list[bool]] = {}


@pytest.fixture(autouse=True)
def _single_thread():
    # bitwise determinism does not depend on intra-op scheduling
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = synth_corpus(root, n_utts=8, seed=11, duration_s=0.5, n_val=2)
    return root, manifest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(marker.args[0], []).append(report.outcome == "passed")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in _outcomes:
            continue
        ok = all(_outcomes[n])
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {CRITERIA[n]}")
