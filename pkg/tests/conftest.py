import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from dnmn.data import SynthSpec, synth_generate  # noqa: E402
from dnmn.layout import DepTree  # noqa: E402
from dnmn.modules import World  # noqa: E402

GEORGIA = """\
1\tWhat\twhat\tDET\t2\tdet
2\tcities\tcity\tNOUN\t3\tnsubj
3\tare\tbe\tAUX\t0\troot
4\tin\tin\tADP\t3\tprep
5\tGeorgia\tgeorgia\tPROPN\t4\tpobj
6\t?\t?\tPUNCT\t3\tpunct"""

STATES = """\
1\tAre\tbe\tAUX\t0\troot
2\tthere\tthere\tPRON\t1\texpl
3\tany\tany\tDET\t4\tdet
4\tstates\tstate\tNOUN\t1\tnsubj
5\t?\t?\tPUNCT\t1\tpunct"""

BIRD = """\
1\tWhat\twhat\tDET\t2\tdet
2\tcolor\tcolor\tNOUN\t3\tnsubj
3\tis\tbe\tAUX\t0\troot
4\tthe\tthe\tDET\t5\tdet
5\tbird\tbird\tNOUN\t3\tnsubj
6\t?\t?\tPUNCT\t3\tpunct"""


@pytest.fixture
def georgia_tree():
    return DepTree.from_conllu(GEORGIA)


@pytest.fixture
def states_tree():
    return DepTree.from_conllu(STATES)


@pytest.fixture(scope="session")
def small_synth():
    return synth_generate(SynthSpec(n_environments=3, questions_per_environment=12, seed=3))


def random_world(rng, n=5, dims=(4, 3, 2), names=None):
    names = names or [f"e{i}" for i in range(n)]
    views = {"category": rng.normal(size=(dims[0], n)),
             "relation": rng.normal(size=(dims[1], n)),
             "attribute": rng.normal(size=(dims[2], n))}
    return World(list(names), views, {nm: i for i, nm in enumerate(names)}, "w")


# -- acceptance summary ------------------------------------------------------
# Tests marked ``criterion(n, title)`` are grouped, and one PASS/FAIL line per
# criterion is printed at the end of the run.

_criteria = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "outcomes": []})
    if call.when == "call" or call.excinfo is not None:
        if call.excinfo is None:
            entry["outcomes"].append("PASS")
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            entry["outcomes"].append("SKIP")
        else:
            entry["outcomes"].append("FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        outcomes = entry["outcomes"]
        if "FAIL" in outcomes:
            verdict = "FAIL"
        elif outcomes and all(o == "PASS" for o in outcomes):
            verdict = "PASS"
        else:
            verdict = "SKIP"
        terminalreporter.write_line(f"criterion {number} ({entry['title']}): {verdict}")
