import numpy as np
import pytest
import torch

from reconvat.datasets import SyntheticSpec, generate_synthetic_corpus, load_clips

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Six short synthetic clips, the last two listed as unlabelled."""
    root = tmp_path_factory.mktemp("corpus")
    spec = SyntheticSpec(n_clips=6, notes_per_clip=(3, 5), pitch_range=(60, 72), duration=2.0, seed=3)
    manifest = generate_synthetic_corpus(spec, root, labelled=[True] * 4 + [False] * 2)
    labelled, unlabelled = load_clips(manifest)
    return root, manifest, labelled, unlabelled


# -- acceptance summary -----------------------------------------------------------------

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "status": "PASS", "details": []})
    if report.failed:
        entry["status"] = "FAIL"
    elif report.skipped and entry["status"] == "PASS" and report.when != "teardown":
        entry["status"] = "SKIP"
    if report.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        detail = "; ".join(entry["details"])
        line = f"criterion {number:2d}  {entry['status']}  {entry['title']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
