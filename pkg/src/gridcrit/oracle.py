"""Complex-network criticality indices and top-fraction labelling.

Nodes are scored from five indices: the optimized degree cluster
(``d_L``, ``d_C``) and the optimized betweenness cluster (``b_H``, ``b_L``,
``b_C``). Branches are scored from the branch betweenness cluster
(``b_He``, ``b_Le``, ``b_Ce``). Betweenness is taken over loop-free
generator-to-load transmission paths found by K-shortest-path enumeration
under electrical-distance weights.
"""

from __future__ import annotations

import heapq
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from gridcrit.grid import GridCase, SignedAdjacency, signed_adjacency
from gridcrit.powerflow import PowerFlowSolution, electrical_distance

NODE_INDICES = ("d_L", "d_C", "b_H", "b_L", "b_C")
BRANCH_INDICES = ("b_He", "b_Le", "b_Ce")
PATH_WEIGHT_FLOOR = 1e-6


@dataclass(frozen=True)
class TransmissionPath:
    buses: tuple[int, ...]  # bus positions, generator first
    branches: tuple[int, ...]  # branch positions, parallel branches included
    weight: float  # w: transferable active power (pu)
    distance: float  # d: summed electrical distance
    capability: float  # c: smallest corridor rating along the path (pu)


@dataclass(frozen=True)
class OracleConfig:
    k: int = 5
    node_weights: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    branch_weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    fraction: float = 0.2
    node_count: int | None = None
    branch_count: int | None = None
    rounding: str = "floor"
    include_endpoints: bool = True
    distance_weighted_degree: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["node_weights"] = list(self.node_weights)
        d["branch_weights"] = list(self.branch_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> OracleConfig:
        d = dict(d)
        for key in ("node_weights", "branch_weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class CriticalityReport:
    bus_ids: list[int]
    branch_ids: list[int]
    node_raw: np.ndarray  # n x 5, columns NODE_INDICES
    node_norm: np.ndarray
    branch_raw: np.ndarray  # m x 3, columns BRANCH_INDICES
    branch_norm: np.ndarray
    node_scores: np.ndarray
    branch_scores: np.ndarray
    node_labels: np.ndarray
    branch_labels: np.ndarray
    config: OracleConfig
    n_paths: int = 0
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bus_ids": list(self.bus_ids),
            "branch_ids": list(self.branch_ids),
            "node_indices": {
                name: {"raw": self.node_raw[:, c].tolist(), "normalized": self.node_norm[:, c].tolist()}
                for c, name in enumerate(NODE_INDICES)
            },
            "branch_indices": {
                name: {"raw": self.branch_raw[:, c].tolist(), "normalized": self.branch_norm[:, c].tolist()}
                for c, name in enumerate(BRANCH_INDICES)
            },
            "node_scores": self.node_scores.tolist(),
            "branch_scores": self.branch_scores.tolist(),
            "node_labels": self.node_labels.astype(int).tolist(),
            "branch_labels": self.branch_labels.astype(int).tolist(),
            "n_paths": self.n_paths,
            "config": self.config.to_dict(),
        }


# -- path enumeration --------------------------------------------------------


def _corridors(case: GridCase) -> dict[tuple[int, int], list[int]]:
    """Branch positions grouped by unordered bus-position pair."""
    f, t = case.branch_endpoints()
    out: dict[tuple[int, int], list[int]] = {}
    for e, (i, j) in enumerate(zip(f, t)):
        out.setdefault((min(i, j), max(i, j)), []).append(e)
    return out


def _dijkstra(adj, src, dst, banned_nodes, banned_edges):
    dist = {src: 0.0}
    prev: dict[int, int] = {}
    heap = [(0.0, src)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        if u == dst:
            path = [u]
            while path[-1] != src:
                path.append(prev[path[-1]])
            return path[::-1]
        done.add(u)
        for v, w in adj[u]:
            if v in banned_nodes or v in done or (u, v) in banned_edges:
                continue
            nd = d + w
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    return None


def _path_cost(path, weight):
    return math.fsum(weight[path[i]][path[i + 1]] for i in range(len(path) - 1))


def yen_paths(adj, weight, src: int, dst: int, k: int) -> list[tuple[int, ...]]:
    """Up to ``k`` loop-free src->dst node sequences, shortest first.

    ``adj`` maps node -> [(neighbour, weight)], ``weight`` is indexable by
    ``[u][v]``. Equal-cost candidates are ordered by node sequence.
    """
    first = _dijkstra(adj, src, dst, set(), set())
    if first is None:
        return []
    accepted = [tuple(first)]
    seen = {accepted[0]}
    candidates: list[tuple[float, tuple[int, ...]]] = []
    while len(accepted) < k:
        last = accepted[-1]
        for i in range(len(last) - 1):
            root = last[: i + 1]
            banned_edges = set()
            for p in accepted:
                if len(p) > i + 1 and p[: i + 1] == root:
                    banned_edges.add((p[i], p[i + 1]))
            spur = _dijkstra(adj, last[i], dst, set(root[:-1]), banned_edges)
            if spur is None:
                continue
            cand = root[:-1] + tuple(spur)
            if cand not in seen:
                seen.add(cand)
                heapq.heappush(candidates, (_path_cost(cand, weight), cand))
        if not candidates:
            break
        accepted.append(heapq.heappop(candidates)[1])
    return accepted


def _bus_adjacency(case: GridCase, dist: np.ndarray):
    adj: dict[int, list[tuple[int, float]]] = {i: [] for i in range(case.n_bus)}
    for i, j in _corridors(case):
        adj[i].append((j, float(dist[i, j])))
        adj[j].append((i, float(dist[i, j])))
    for nb in adj.values():
        nb.sort()
    return adj


def k_shortest_paths(
    case: GridCase,
    dist: np.ndarray,
    j: int,
    k: int,
    K: int,
    flow: PowerFlowSolution | None = None,
    _ctx=None,
) -> list[TransmissionPath]:
    """K shortest loop-free transmission paths from generator bus ``j`` to load bus ``k``.

    ``j`` and ``k`` are bus ids. Without a power-flow solution the path
    weight falls back to the floor value. A disconnected pair yields [].
    """
    if j == k:
        raise ValueError("generator and load bus must differ")
    if K < 1:
        raise ValueError("K must be >= 1")
    adj, corr, rating, f, through, weight = _ctx if _ctx is not None else _path_context(case, dist, flow)
    idx = case.bus_index
    out = []
    for buses in yen_paths(adj, weight, idx[j], idx[k], K):
        branches: list[int] = []
        flows, caps = [], []
        for u, v in zip(buses[:-1], buses[1:]):
            group = corr[(u, v) if u < v else (v, u)]
            branches.extend(group)
            net = sum(through[e] if f[e] == u else -through[e] for e in group)
            flows.append(abs(net))
            caps.append(sum(rating[e] for e in group))
        out.append(
            TransmissionPath(
                buses=tuple(int(b) for b in buses),
                branches=tuple(int(e) for e in branches),
                weight=max(min(flows), PATH_WEIGHT_FLOOR),
                distance=_path_cost(buses, weight),
                capability=min(caps),
            )
        )
    return out


def _path_context(case, dist, flow):
    through = flow.p_through if flow is not None else np.zeros(case.n_branch)
    f, _ = case.branch_endpoints()
    return (
        _bus_adjacency(case, dist),
        _corridors(case),
        [br.rating for br in case.branches],
        f.tolist(),
        through.tolist(),
        np.asarray(dist, dtype=float).tolist(),
    )


def all_transmission_paths(
    case: GridCase, flow: PowerFlowSolution, dist: np.ndarray, K: int
) -> list[TransmissionPath]:
    """Paths for every (generator, load) pair with distinct buses, in (j, k) order."""
    ctx = _path_context(case, dist, flow)
    paths = []
    for j in case.generator_buses:
        for k in case.load_buses:
            if j != k:
                paths.extend(k_shortest_paths(case, dist, j, k, K, flow, _ctx=ctx))
    return paths


# -- indices -----------------------------------------------------------------


def node_degree_cluster(
    case: GridCase, adj: SignedAdjacency, dist: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Optimized node degree cluster ``(d_L, d_C)`` per bus position.

    ``d_C`` is the larger of the summed ratings on outgoing and on incoming
    branches. Passing ``dist`` divides each ``d_L`` term by the electrical
    distance of the pair.
    """
    n = case.n_bus
    cap = np.zeros((n, n))
    f, t = case.branch_endpoints()
    for e, br in enumerate(case.branches):
        cap[f[e], t[e]] += br.rating
        cap[t[e], f[e]] += br.rating
    a = adj.alpha.astype(float)
    if dist is None:
        d_L = np.abs(a).sum(axis=1)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            d_L = np.where(a != 0, np.abs(a) / dist, 0.0).sum(axis=1)
    out_cap = (cap * (a > 0)).sum(axis=1)
    in_cap = (cap * (a < 0)).sum(axis=1)
    return d_L, np.maximum(out_cap, in_cap)


def _betweenness(paths, size, members, include_endpoints=True):
    count = np.zeros(size)
    wd = np.zeros(size)
    wc = np.zeros(size)
    total_wd = math.fsum(p.weight * p.distance for p in paths)
    total_wc = math.fsum(p.weight * p.capability for p in paths)
    for p in paths:
        on = members(p)
        if not include_endpoints:
            on = on[1:-1]
        count[list(on)] += 1.0
        wd[list(on)] += p.weight * p.distance
        wc[list(on)] += p.weight * p.capability
    if not paths:
        warnings.warn("no generator-to-load transmission paths; betweenness set to zero")
        return count, wd, wc
    return count / len(paths), wd / total_wd, wc / total_wc


def node_betweenness_cluster(paths, n_bus: int, include_endpoints: bool = True):
    """``(b_H, b_L, b_C)`` per bus position."""
    return _betweenness(paths, n_bus, lambda p: p.buses, include_endpoints)


def branch_betweenness_cluster(paths, n_branch: int):
    """``(b_He, b_Le, b_Ce)`` per branch position."""
    return _betweenness(paths, n_branch, lambda p: p.branches)


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Column-wise min-max scaling; constant columns map to zero."""
    values = np.asarray(values, dtype=float)
    lo = values.min(axis=0)
    span = values.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (values - lo) / safe, 0.0)


def criticality_scores(indices: np.ndarray, weights) -> tuple[np.ndarray, np.ndarray]:
    """Normalize each index over the population and return (normalized, weighted score)."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (indices.shape[1],):
        raise ValueError(f"expected {indices.shape[1]} weights, got {w.shape}")
    if np.any(w < 0):
        raise ValueError("index weights must be nonnegative")
    if not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError("index weights must sum to 1")
    norm = minmax_normalize(indices)
    return norm, np.clip(norm @ w, 0.0, 1.0)


def critical_count(n: int, fraction: float, rounding: str = "ceil") -> int:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    raw = fraction * n
    # guard against 0.2 * 30 = 6.000000000000001
    raw = round(raw, 9)
    if rounding == "ceil":
        return math.ceil(raw)
    if rounding == "floor":
        return max(1, math.floor(raw)) if n else 0
    raise ValueError(f"unknown rounding {rounding!r}")


def label_top_fraction(
    scores, ids=None, fraction: float = 0.2, count: int | None = None, rounding: str = "ceil"
) -> np.ndarray:
    """Binary labels marking the highest-scoring entries.

    Exactly ``count`` entries (default ``ceil(fraction * N)``) are set; equal
    scores are resolved in favour of the smaller id.
    """
    scores = np.asarray(scores, dtype=float)
    n = len(scores)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    if count is None:
        count = critical_count(n, fraction, rounding)
    order = np.lexsort((ids, -scores))
    labels = np.zeros(n, dtype=np.int8)
    labels[order[:count]] = 1
    return labels


def evaluate_case(
    case: GridCase, flow: PowerFlowSolution, config: OracleConfig = OracleConfig()
) -> CriticalityReport:
    """Full labelling pipeline for one solved operating scenario."""
    if not flow.converged:
        raise ValueError("criticality evaluation needs a converged power flow")
    dist = electrical_distance(case)
    adj = signed_adjacency(case, flow)
    d_L, d_C = node_degree_cluster(case, adj, dist if config.distance_weighted_degree else None)
    paths = all_transmission_paths(case, flow, dist, config.k)
    b_H, b_L, b_C = node_betweenness_cluster(paths, case.n_bus, config.include_endpoints)
    b_He, b_Le, b_Ce = branch_betweenness_cluster(paths, case.n_branch)

    node_raw = np.column_stack([d_L, d_C, b_H, b_L, b_C])
    branch_raw = np.column_stack([b_He, b_Le, b_Ce])
    node_norm, node_scores = criticality_scores(node_raw, config.node_weights)
    branch_norm, branch_scores = criticality_scores(branch_raw, config.branch_weights)
    bus_ids = case.bus_ids
    branch_ids = [br.id for br in case.branches]
    return CriticalityReport(
        bus_ids=bus_ids,
        branch_ids=branch_ids,
        node_raw=node_raw,
        node_norm=node_norm,
        branch_raw=branch_raw,
        branch_norm=branch_norm,
        node_scores=node_scores,
        branch_scores=branch_scores,
        node_labels=label_top_fraction(
            node_scores, bus_ids, config.fraction, config.node_count, config.rounding
        ),
        branch_labels=label_top_fraction(
            branch_scores, branch_ids, config.fraction, config.branch_count, config.rounding
        ),
        config=config,
        n_paths=len(paths),
    )
