import dataclasses

import numpy as np
import pytest

from owgr.synth import Counts, default_catalog, gen_dataset
from owgr.tasks import SequenceParams, build_sequence


@pytest.fixture(scope="session")
def catalog():
    return default_catalog()


@pytest.fixture(scope="session")
def small_context_dataset(catalog):
    return gen_dataset(catalog, Counts(6, None, None, ["u00"]), seed=3)


@pytest.fixture(scope="session")
def small_sequence(small_context_dataset):
    params = SequenceParams(num_tasks=3, granularity="coarse")
    return build_sequence("new_context", params, small_context_dataset, np.random.default_rng(0))


@pytest.fixture(scope="session")
def clean_catalog(catalog):
    """Catalog whose first context carries no noise and no baseline motion."""
    cid = next(iter(catalog.contexts))
    quiet = dataclasses.replace(catalog.contexts[cid], noise_sigma=0.0, baseline_amp=(0.0,) * 6)
    return dataclasses.replace(catalog, contexts={**catalog.contexts, cid: quiet})


# -- acceptance summary ----------------------------------------------------

_CRITERIA: dict = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, text = mark.args
            _CRITERIA.setdefault(number, {"text": text, "nodes": {}})["nodes"][item.nodeid] = None


def pytest_runtest_logreport(report):
    for entry in _CRITERIA.values():
        if report.nodeid in entry["nodes"]:
            prev = entry["nodes"][report.nodeid]
            if report.failed or (report.when == "call" and prev is None):
                entry["nodes"][report.nodeid] = "FAIL" if report.failed else "PASS"
            for name, value in report.user_properties:
                if name == "detail":
                    entry["detail"] = value


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        states = set(entry["nodes"].values())
        status = "FAIL" if "FAIL" in states else "PASS" if states == {"PASS"} else "NOT RUN"
        terminalreporter.write_line(f"criterion {number:>2}: {status:<7} {entry['text']}")
        if "detail" in entry:
            terminalreporter.write_line(f"              {entry['detail']}")
