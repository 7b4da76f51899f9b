import numpy as np
import pytest
import torch

from echorecon.syndata import DatasetConfig, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 structural-vs-normal clips at 32x32, shared by the train/eval/cli tests."""
    root = tmp_path_factory.mktemp("tiny_data")
    generate_dataset(DatasetConfig(n_normal=6, n_abnormal=6, anomaly="structural", n_frames=16, size=32), 7, root)
    return root


# --- acceptance summary ---------------------------------------------------------------

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number covered by the test")


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("measured", "")
        _CRITERIA.setdefault(crit, []).append((report.nodeid.split("::")[-1], report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_CRITERIA):
        runs = _CRITERIA[crit]
        ok = all(outcome == "passed" for _, outcome, _ in runs)
        detail = "; ".join(d for _, _, d in runs if d)
        terminalreporter.write_line(f"criterion {crit:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            item.user_properties.append(("criterion", marker.args[0]))
