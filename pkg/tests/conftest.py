import numpy as np
import pytest

from ddsec.network import load_bundled, load_network


def two_bus_case(droop_f=1.2, droop_v=0.05, r=0.0, x=0.1, pd=0.5, qd=0.1, p_set=0.5, q_set=0.1):
    """One GFM at bus 1 feeding a load at bus 2 over a single line."""
    return {
        "name": "two-bus",
        "buses": {"columns": ["index", "type", "pd", "qd"],
                  "rows": [[1, "gfm", 0.0, 0.0], [2, "load", pd, qd]]},
        "branches": {"columns": ["from", "to", "r", "x", "b"], "rows": [[1, 2, r, x, 0.0]]},
        "ders": {"columns": ["der", "bus", "kind", "p_set", "q_set", "e_nom", "droop_f", "droop_v"],
                 "rows": [[1, 1, "gfm", p_set, q_set, 1.0, droop_f, droop_v]]},
        "critical_buses": [2],
        "critical_lines": [[1, 2]],
    }


def two_gfm_case(droop_f=1.2, droop_v=0.05, pd=0.8, qd=0.2, p_set=0.4, q_set=0.1, r=0.0):
    """Two identical GFMs feeding a common load bus through identical lines."""
    return {
        "name": "two-gfm",
        "buses": {"columns": ["index", "type", "pd", "qd"],
                  "rows": [[1, "gfm", 0.0, 0.0], [2, "gfm", 0.0, 0.0], [3, "load", pd, qd]]},
        "branches": {"columns": ["from", "to", "r", "x", "b"],
                     "rows": [[1, 3, r, 0.1, 0.0], [2, 3, r, 0.1, 0.0]]},
        "ders": {"columns": ["der", "bus", "kind", "p_set", "q_set", "e_nom", "droop_f", "droop_v"],
                 "rows": [[1, 1, "gfm", p_set, q_set, 1.0, droop_f, droop_v],
                          [2, 2, "gfm", p_set, q_set, 1.0, droop_f, droop_v]]},
        "critical_buses": [3],
        "critical_lines": [[1, 3]],
    }


@pytest.fixture(scope="session")
def ieee14():
    return load_bundled()


@pytest.fixture
def two_bus():
    return load_network(two_bus_case())


@pytest.fixture
def two_gfm():
    return load_network(two_gfm_case())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance report -------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``record(number, title, passed, detail)`` for the acceptance summary."""
    def record(number, title, passed, detail=""):
        ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} [{detail}]")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        tr.write_line(f"{n}. {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
