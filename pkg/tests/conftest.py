import json
from pathlib import Path

import numpy as np
import pytest

from pflab.network import Branch, Bus, BusKind, Generator, NetworkCase, load_case

DATA = Path(__file__).parent / "data"


def make_case(n_buses, branches, loads=None, gens=(), kinds=None, name="toy", v_mag=None):
    """Small cases built directly, bypassing file validation."""
    loads = loads or {}
    kinds = kinds or {}
    buses = []
    for i in range(n_buses):
        p, q = loads.get(i, (0.0, 0.0))
        kind = kinds.get(i, BusKind.SLACK if i == 0 else BusKind.PQ)
        buses.append(Bus(id=i, kind=kind, p_load=p, q_load=q, v_mag_init=(v_mag or {}).get(i, 1.0)))
    brs = [Branch(*b) if isinstance(b, tuple) else b for b in branches]
    return NetworkCase(buses=tuple(buses), branches=tuple(brs), generators=tuple(gens), name=name)


@pytest.fixture
def two_bus():
    """Slack at bus 0, 100 MW / 0 MVAr load at bus 1, lossless line x = 0.1."""
    return make_case(
        2,
        [Branch(0, 1, r=0.0, x=0.1)],
        loads={1: (100.0, 0.0)},
        gens=[Generator(bus=0, p_set=0.0, v_set=1.0)],
    )


@pytest.fixture(scope="session")
def case14():
    return load_case("ieee14")


@pytest.fixture(scope="session")
def case24():
    return load_case("ieee24")


@pytest.fixture(scope="session")
def reference_pf():
    return json.loads((DATA / "reference_pf.json").read_text())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, echoed after the run regardless of capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
