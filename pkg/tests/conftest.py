import numpy as np
import pytest
import torch

from past import data as D

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_phantom():
    return D.generate_phantom(D.PhantomSpec(n_source=4, n_target=4, shape=(64, 64, 16), rng_seed=7))


def random_volume(rng, shape=(16, 16, 4), **kw):
    return D.Volume(rng.normal(size=shape).astype(np.float32), **kw)


def random_labels(rng, shape=(16, 16, 4)):
    return D.LabelMap(rng.integers(0, D.N_CLASSES, size=shape))


# ---- one pass/fail line per acceptance criterion ----

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion implemented by this test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": []})
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["ok"] = False
        entry["detail"].append(f"{item.name}: {call.excinfo.typename}")
    if call.when == "call":
        entry["ran"] = True


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        line = f"criterion {number}: {status}  {e['title']}"
        if e["detail"]:
            line += "  (" + "; ".join(e["detail"]) + ")"
        terminalreporter.write_line(line)
