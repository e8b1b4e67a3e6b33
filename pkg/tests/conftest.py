import numpy as np
import pytest

from gridcrit.grid import Branch, Bus, GridCase, ieee30, parse_case

FOUR_BUS = """\
[BUS]
id,kind,p_load,q_load,v_setpoint
1,slack,0,0,1.02
2,pq,0,0,
3,pq,0.4,0.1,
4,pq,0.3,0.05,
[BRANCH]
id,from,to,r,x,b_shunt,rating
1,1,2,0.01,0.10,0.0,1.0
2,2,3,0.02,0.15,0.0,0.6
3,1,4,0.015,0.12,0.0,0.8
4,2,4,0.01,0.20,0.0,0.5
[GEN]
bus_id,p_gen,q_gen
1,0,0
"""


def two_bus_text(p_load=0.0, q_load=0.0, r=0.0, x=0.1, b=0.0, rating=1.0):
    return f"""\
[BUS]
id,kind,p_load,q_load,v_setpoint
1,slack,0,0,1.0
2,pq,{p_load},{q_load},
[BRANCH]
id,from,to,r,x,b_shunt,rating
1,1,2,{r},{x},{b},{rating}
[GEN]
bus_id,p_gen,q_gen
1,0,0
"""


def chain_case(n=3, x=0.1, load=0.2):
    """Slack at bus 1, a single load at bus n, series branches 1-2-...-n."""
    buses = [Bus(1, "slack", v_setpoint=1.0)]
    buses += [Bus(i, "pq") for i in range(2, n)]
    buses += [Bus(n, "pq", p_load=load, q_load=0.0)]
    branches = [Branch(i, i, i + 1, 0.0, x, 0.0, 1.0) for i in range(1, n)]
    return GridCase(buses, branches)


def random_case(rng, n_bus, extra_edges=None, max_load=0.15):
    """Random connected grid: spanning tree plus chords, slack at 1, some PV buses."""
    order = rng.permutation(np.arange(2, n_bus + 1)).tolist()
    edges = set()
    placed = [1]
    for b in order:
        other = int(rng.choice(placed))
        edges.add((min(b, other), max(b, other)))
        placed.append(b)
    all_pairs = [(i, j) for i in range(1, n_bus + 1) for j in range(i + 1, n_bus + 1) if (i, j) not in edges]
    k = int(rng.integers(0, min(len(all_pairs), n_bus) + 1)) if extra_edges is None else extra_edges
    for idx in rng.permutation(len(all_pairs))[:k]:
        edges.add(all_pairs[idx])
    kinds = ["slack"] + ["pv" if rng.random() < 0.25 else "pq" for _ in range(n_bus - 1)]
    if "pq" not in kinds:
        kinds[-1] = "pq"
    buses = []
    for i, kind in enumerate(kinds, start=1):
        load = float(rng.uniform(0.02, max_load)) if kind == "pq" or rng.random() < 0.3 else 0.0
        buses.append(
            Bus(
                i,
                kind,
                p_load=load,
                q_load=0.3 * load,
                v_setpoint=float(rng.uniform(1.0, 1.05)) if kind != "pq" else 1.0,
                p_gen=float(rng.uniform(0.05, 0.2)) if kind == "pv" else 0.0,
            )
        )
    branches = []
    for e, (i, j) in enumerate(sorted(edges), start=1):
        if rng.random() < 0.5:
            i, j = j, i
        branches.append(
            Branch(
                e, i, j,
                float(rng.uniform(0.0, 0.05)),
                float(rng.uniform(0.05, 0.3)),
                float(rng.uniform(0.0, 0.04)),
                float(rng.uniform(0.3, 1.5)),
            )
        )
    return GridCase(buses, branches)


@pytest.fixture
def four_bus():
    return parse_case(FOUR_BUS)


@pytest.fixture(scope="session")
def case30():
    return ieee30()


# -- acceptance verdicts -----------------------------------------------------

VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed after the run."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
