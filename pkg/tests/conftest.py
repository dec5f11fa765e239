import sys

import numpy as np
import pytest

from edrel import simlab as S
from edrel._parallel import replicate_rng


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def model_problem(model, tau, k=None, seed=11, index=0, n=200):
    """A generated draw plus its working models and options."""
    d = S.SimDesign(model=model, tau=tau, k=k, n=n, reps=1, seed=seed)
    draw = S.generate(d, replicate_rng(seed, index))
    ef, pm, rm = S.build_models(d)
    return d, draw, ef, pm, rm, S.design_options(d)


@pytest.fixture
def m1():
    return model_problem(1, (1, 0, 0, 0), k=2)


@pytest.fixture
def m2():
    return model_problem(2, (1, 0, 0), k=2)


@pytest.fixture
def m3():
    return model_problem(3, (1, 0, 0, 0))


CRITERIA = ("1", "2", "3", "4", "5", "6", "7", "8", "9", "k4")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in CRITERIA:
        if key in mod.RESULTS:
            ok, detail = mod.RESULTS[key]
            name = "k=4 ordering" if key == "k4" else f"criterion {key}"
            note = "  [known limit, marked xfail]" if not ok and key in mod.KNOWN_LIMITS else ""
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}{note}")
