import json

import numpy as np
import pytest
import torch

from jointattn.datakit import SynthConfig, generate_synthetic


def pair_obj(pid, d1=10.0, d3=10.0, segments=()):
    return {
        "pair_id": pid,
        "first_view": {"path": f"{pid}/first", "fps": 1.0, "duration": d1},
        "third_view": {"path": f"{pid}/third", "fps": 1.0, "duration": d3},
        "action_segments": [{"label": lab, "start": s, "end": e} for lab, s, e in segments],
    }


@pytest.fixture
def manifest_file(tmp_path):
    """Three well-formed pairs with differing first-person durations."""
    path = tmp_path / "manifest.jsonl"
    lines = [pair_obj("a", 10, 12, [("open", 2, 6)]), pair_obj("b", 20, 10), pair_obj("c", 8, 8, [("pour", 0, 3)])]
    path.write_text("".join(json.dumps(o) + "\n" for o in lines))
    return path


@pytest.fixture(scope="session")
def tiny_synth():
    return generate_synthetic(SynthConfig(), 42, 6)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


# -- acceptance summary ------------------------------------------------------
# Tests tagged ``@pytest.mark.criterion(key, title)`` are folded into one
# PASS/FAIL line per criterion at the end of the run. Values recorded with
# ``record_property`` are echoed on that line.

_criteria: dict[str, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        key, title = mark.args
        entry = _criteria.setdefault(key, {"title": title, "failed": [], "n": 0, "notes": []})
        entry["n"] += 1
        if not rep.passed:
            entry["failed"].append(item.name)
        entry["notes"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")

    def order(key):
        return (0, int(key)) if key.isdigit() else (1, key)

    for key in sorted(_criteria, key=order):
        e = _criteria[key]
        status = "FAIL" if e["failed"] else "PASS"
        line = f"[{status}] criterion {key}: {e['title']} ({e['n']} checks)"
        if e["notes"]:
            line += "  " + "; ".join(e["notes"])
        if e["failed"]:
            line += "  failed: " + ", ".join(e["failed"])
        tr.write_line(line)
