"""Grid data model, case-file parsing and graph structure helpers.

Case files are plain UTF-8 text with three CSV sections::

    [BUS]
    id,kind,p_load,q_load,v_setpoint
    [BRANCH]
    id,from,to,r,x,b_shunt,rating
    [GEN]
    bus_id,p_gen,q_gen

An optional ``base_mva = <value>`` line may precede the sections (default 100).
All electrical quantities are per-unit on that base.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from gridcrit.powerflow import PowerFlowSolution

BUS_KINDS = ("slack", "pv", "pq")
_SECTION_COLUMNS = {
    "BUS": ["id", "kind", "p_load", "q_load", "v_setpoint"],
    "BRANCH": ["id", "from", "to", "r", "x", "b_shunt", "rating"],
    "GEN": ["bus_id", "p_gen", "q_gen"],
}


class CaseError(ValueError):
    """Raised for malformed or inconsistent case data."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p_load: float = 0.0
    q_load: float = 0.0
    v_setpoint: float = 1.0
    p_gen: float = 0.0
    q_gen: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0
    rating: float = 1.0


@dataclass(frozen=True)
class GridCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    generator_buses: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        if not self.generator_buses:
            gens = tuple(b.id for b in self.buses if b.kind in ("slack", "pv"))
            object.__setattr__(self, "generator_buses", gens)
        else:
            object.__setattr__(self, "generator_buses", tuple(self.generator_buses))
        validate_case(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def slack_bus(self) -> int:
        return next(b.id for b in self.buses if b.kind == "slack")

    @property
    def bus_index(self) -> dict[int, int]:
        """Map bus id to its row position."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def load_buses(self) -> tuple[int, ...]:
        """Buses carrying a nonzero load; the sink set of transmission paths."""
        return tuple(b.id for b in self.buses if b.p_load != 0.0 or b.q_load != 0.0)

    def branch_endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Positional (from, to) index arrays over branches."""
        idx = self.bus_index
        f = np.array([idx[br.from_bus] for br in self.branches], dtype=int)
        t = np.array([idx[br.to_bus] for br in self.branches], dtype=int)
        return f, t


def validate_case(case: GridCase) -> None:
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise CaseError(f"duplicate bus id {dup}")
    known = set(ids)
    kinds = [b.kind for b in case.buses]
    for b in case.buses:
        if b.kind not in BUS_KINDS:
            raise CaseError(f"bus {b.id}: unknown kind {b.kind!r}")
        if not (math.isfinite(b.p_load) and math.isfinite(b.q_load)):
            raise CaseError(f"bus {b.id}: non-finite load")
        if b.kind != "pq" and not b.v_setpoint > 0:
            raise CaseError(f"bus {b.id}: voltage setpoint must be positive")
    if kinds.count("slack") != 1:
        raise CaseError(f"expected exactly one slack bus, found {kinds.count('slack')}")
    if "pq" not in kinds:
        raise CaseError("case needs at least one load (pq) bus")
    branch_ids = [br.id for br in case.branches]
    if len(set(branch_ids)) != len(branch_ids):
        raise CaseError("duplicate branch id")
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise CaseError(f"branch {br.id}: dangling endpoint bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseError(f"branch {br.id}: self loop at bus {br.from_bus}")
        if br.x == 0:
            raise CaseError(f"branch {br.id}: zero reactance")
        if not br.rating > 0:
            raise CaseError(f"branch {br.id}: rating must be positive")
    for g in case.generator_buses:
        if g not in known:
            raise CaseError(f"generator at unknown bus {g}")


# -- parsing -----------------------------------------------------------------


def parse_case(text: str) -> GridCase:
    """Parse case-file text into a validated :class:`GridCase`.

    Errors carry the 1-based line number of the offending row.
    """
    base_mva = 100.0
    sections: dict[str, list[tuple[int, list[str]]]] = {}
    current = None
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().upper()
            if current not in _SECTION_COLUMNS:
                raise CaseError(f"unknown section [{current}]", lineno)
            if current in sections:
                raise CaseError(f"repeated section [{current}]", lineno)
            sections[current] = []
            header_seen = False
            continue
        if current is None:
            key, sep, value = line.partition("=")
            if sep and key.strip().lower() == "base_mva":
                try:
                    base_mva = float(value)
                except ValueError:
                    raise CaseError(f"bad base_mva {value.strip()!r}", lineno) from None
                continue
            raise CaseError("content outside of any section", lineno)
        row = [c.strip() for c in next(csv.reader([line]))]
        if not header_seen:
            if row != _SECTION_COLUMNS[current]:
                raise CaseError(
                    f"[{current}] header must be {','.join(_SECTION_COLUMNS[current])}", lineno
                )
            header_seen = True
            continue
        if len(row) != len(_SECTION_COLUMNS[current]):
            raise CaseError(
                f"[{current}] row has {len(row)} fields, expected {len(_SECTION_COLUMNS[current])}",
                lineno,
            )
        sections[current].append((lineno, row))

    for name in ("BUS", "BRANCH", "GEN"):
        if name not in sections:
            raise CaseError(f"missing [{name}] section")

    def num(value: str, lineno: int, kind=float):
        try:
            return kind(value)
        except ValueError:
            raise CaseError(f"malformed number {value!r}", lineno) from None

    bus_rows: dict[int, dict] = {}
    bus_lines: dict[int, int] = {}
    for lineno, row in sections["BUS"]:
        bid = num(row[0], lineno, int)
        if bid in bus_rows:
            raise CaseError(f"duplicate bus id {bid}", lineno)
        kind = row[1].lower()
        if kind not in BUS_KINDS:
            raise CaseError(f"unknown bus kind {row[1]!r}", lineno)
        vset = num(row[4], lineno) if row[4] else 1.0
        if kind != "pq" and not vset > 0:
            raise CaseError(f"bus {bid}: voltage setpoint must be positive", lineno)
        bus_rows[bid] = dict(
            id=bid, kind=kind, p_load=num(row[2], lineno), q_load=num(row[3], lineno),
            v_setpoint=vset,
        )
        bus_lines[bid] = lineno

    branches = []
    seen_branch: set[int] = set()
    for lineno, row in sections["BRANCH"]:
        brid = num(row[0], lineno, int)
        if brid in seen_branch:
            raise CaseError(f"duplicate branch id {brid}", lineno)
        seen_branch.add(brid)
        f, t = num(row[1], lineno, int), num(row[2], lineno, int)
        for end in (f, t):
            if end not in bus_rows:
                raise CaseError(f"branch {brid}: dangling endpoint bus {end}", lineno)
        if f == t:
            raise CaseError(f"branch {brid}: self loop", lineno)
        x = num(row[4], lineno)
        if x == 0:
            raise CaseError(f"branch {brid}: zero reactance", lineno)
        rating = num(row[6], lineno)
        if not rating > 0:
            raise CaseError(f"branch {brid}: rating must be positive", lineno)
        branches.append(Branch(brid, f, t, num(row[3], lineno), x, num(row[5], lineno), rating))

    gen_buses: list[int] = []
    for lineno, row in sections["GEN"]:
        bid = num(row[0], lineno, int)
        if bid not in bus_rows:
            raise CaseError(f"generator at unknown bus {bid}", lineno)
        if bus_rows[bid]["kind"] == "pq":
            raise CaseError(f"generator at pq bus {bid}", lineno)
        if bid in gen_buses:
            raise CaseError(f"duplicate generator row for bus {bid}", lineno)
        gen_buses.append(bid)
        bus_rows[bid]["p_gen"] = num(row[1], lineno)
        bus_rows[bid]["q_gen"] = num(row[2], lineno)
    for bid, b in bus_rows.items():
        if b["kind"] != "pq" and bid not in gen_buses:
            raise CaseError(f"{b['kind']} bus {bid} has no [GEN] row", bus_lines[bid])

    buses = [Bus(**b) for b in bus_rows.values()]
    return GridCase(buses, branches, base_mva, tuple(gen_buses))


def serialize_case(case: GridCase) -> str:
    """Inverse of :func:`parse_case`; floats are written with ``repr`` precision."""
    out = io.StringIO()
    out.write(f"base_mva = {case.base_mva!r}\n[BUS]\n")
    out.write(",".join(_SECTION_COLUMNS["BUS"]) + "\n")
    for b in case.buses:
        out.write(f"{b.id},{b.kind},{b.p_load!r},{b.q_load!r},{b.v_setpoint!r}\n")
    out.write("[BRANCH]\n" + ",".join(_SECTION_COLUMNS["BRANCH"]) + "\n")
    for br in case.branches:
        out.write(
            f"{br.id},{br.from_bus},{br.to_bus},{br.r!r},{br.x!r},{br.b_shunt!r},{br.rating!r}\n"
        )
    out.write("[GEN]\n" + ",".join(_SECTION_COLUMNS["GEN"]) + "\n")
    by_id = {b.id: b for b in case.buses}
    for g in case.generator_buses:
        out.write(f"{g},{by_id[g].p_gen!r},{by_id[g].q_gen!r}\n")
    return out.getvalue()


def load_case(path) -> GridCase:
    with open(path, encoding="utf-8") as fh:
        return parse_case(fh.read())


def ieee30() -> GridCase:
    """The bundled IEEE 30-bus case."""
    text = resources.files("gridcrit.data").joinpath("ieee30.case").read_text(encoding="utf-8")
    return parse_case(text)


# -- graph structure ---------------------------------------------------------


@dataclass(frozen=True)
class SignedAdjacency:
    """Flow-direction adjacency: ``alpha[i, j] = +1`` when power flows i -> j.

    Rows and columns follow the case's bus order.
    """

    alpha: np.ndarray

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    def degree(self) -> np.ndarray:
        return np.abs(self.alpha).sum(axis=1)


def signed_adjacency(case: GridCase, flow: PowerFlowSolution) -> SignedAdjacency:
    """Direction of net active power between every connected bus pair.

    The through-flow of a branch is ``(p_from - p_to) / 2`` measured from its
    from-end, which is antisymmetric even when line losses make both terminal
    injections positive. Parallel branches are summed. Exactly zero net flow
    falls back to the from->to orientation of the lowest-id branch in the pair.
    """
    if len(flow.p_from) != case.n_branch or len(flow.vm) != case.n_bus:
        raise CaseError("power flow solution does not match case topology")
    n = case.n_bus
    f, t = case.branch_endpoints()
    through = flow.p_through
    net = np.zeros((n, n))
    orient = np.zeros((n, n))
    for e in np.argsort([br.id for br in case.branches], kind="stable"):
        i, j = f[e], t[e]
        net[i, j] += through[e]
        net[j, i] -= through[e]
        if orient[i, j] == 0:
            orient[i, j], orient[j, i] = 1.0, -1.0
    alpha = np.sign(net)
    ties = (alpha == 0) & (orient != 0)
    alpha[ties] = orient[ties]
    return SignedAdjacency(alpha.astype(np.int8))


@dataclass(frozen=True)
class LineGraph:
    """Branch adjacency: two branches are neighbours when they share a bus."""

    neighbors: tuple[tuple[int, ...], ...]

    @property
    def m(self) -> int:
        return len(self.neighbors)

    def degree(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=float)


def line_graph(case: GridCase) -> LineGraph:
    """Neighbour lists (by branch position) of the case's line graph."""
    at_bus: dict[int, list[int]] = {}
    for e, br in enumerate(case.branches):
        at_bus.setdefault(br.from_bus, []).append(e)
        at_bus.setdefault(br.to_bus, []).append(e)
    neigh: list[set[int]] = [set() for _ in case.branches]
    for incident in at_bus.values():
        for e in incident:
            neigh[e].update(incident)
    for e, s in enumerate(neigh):
        s.discard(e)
    return LineGraph(tuple(tuple(sorted(s)) for s in neigh))


def bus_neighbors(case: GridCase) -> tuple[tuple[int, ...], ...]:
    """Undirected bus neighbour lists by bus position (parallel branches merged)."""
    f, t = case.branch_endpoints()
    neigh: list[set[int]] = [set() for _ in case.buses]
    for i, j in zip(f, t):
        neigh[i].add(int(j))
        neigh[j].add(int(i))
    return tuple(tuple(sorted(s)) for s in neigh)
