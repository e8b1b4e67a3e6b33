"""Perturbed operating scenarios, feature extraction and dataset persistence."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from gridcrit.grid import GridCase, bus_neighbors, line_graph, signed_adjacency
from gridcrit.oracle import CriticalityReport, OracleConfig, evaluate_case
from gridcrit.powerflow import DEFAULT_MAX_ITER, DEFAULT_TOL, PowerFlowSolution, solve_ac

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
NODE_FEATURES = ("degree", "p_load", "q_load", "v_mag", "v_angle")
BRANCH_FEATURES = ("degree", "x", "p_flow", "q_flow", "loading", "loss")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


class DatasetError(RuntimeError):
    pass


@dataclass
class FeatureGraph:
    node_features: np.ndarray  # n x 5
    branch_features: np.ndarray  # m x 6
    node_neighbors: tuple[tuple[int, ...], ...]
    branch_neighbors: tuple[tuple[int, ...], ...]
    node_labels: np.ndarray | None = None
    branch_labels: np.ndarray | None = None
    scenario: int = -1

    def features(self, target: str) -> np.ndarray:
        return self.node_features if target == "nodes" else self.branch_features

    def neighbors(self, target: str):
        return self.node_neighbors if target == "nodes" else self.branch_neighbors

    def labels(self, target: str) -> np.ndarray | None:
        return self.node_labels if target == "nodes" else self.branch_labels

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "node_features": self.node_features.tolist(),
            "branch_features": self.branch_features.tolist(),
            "node_neighbors": [list(nb) for nb in self.node_neighbors],
            "branch_neighbors": [list(nb) for nb in self.branch_neighbors],
            "node_labels": None if self.node_labels is None else self.node_labels.astype(int).tolist(),
            "branch_labels": None if self.branch_labels is None else self.branch_labels.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> FeatureGraph:
        def labels(v):
            return None if v is None else np.asarray(v, dtype=np.int8)

        return cls(
            node_features=np.asarray(d["node_features"], dtype=float),
            branch_features=np.asarray(d["branch_features"], dtype=float),
            node_neighbors=tuple(tuple(nb) for nb in d["node_neighbors"]),
            branch_neighbors=tuple(tuple(nb) for nb in d["branch_neighbors"]),
            node_labels=labels(d["node_labels"]),
            branch_labels=labels(d["branch_labels"]),
            scenario=d["scenario"],
        )


def perturb_case(base: GridCase, seed, lo: float = 0.8, hi: float = 1.2) -> GridCase:
    """Scale generation, reactances and loads by independent uniform factors.

    Every generator's active output, every branch reactance and every bus
    load (P and Q sharing one factor) is multiplied by a draw from
    ``[lo, hi]``. The same seed always yields the same case.
    """
    if not (0 < lo <= hi):
        raise ValueError("need 0 < lo <= hi")
    rng = np.random.default_rng(seed)
    gen_f = rng.uniform(lo, hi, len(base.generator_buses))
    x_f = rng.uniform(lo, hi, base.n_branch)
    load_f = rng.uniform(lo, hi, base.n_bus)
    gen_factor = dict(zip(base.generator_buses, gen_f))
    buses = []
    for b, lf in zip(base.buses, load_f):
        gf = gen_factor.get(b.id, 1.0)
        buses.append(replace(b, p_load=b.p_load * lf, q_load=b.q_load * lf, p_gen=b.p_gen * gf))
    branches = [replace(br, x=br.x * xf) for br, xf in zip(base.branches, x_f)]
    return GridCase(buses, branches, base.base_mva, base.generator_buses)


def extract_features(
    case: GridCase, flow: PowerFlowSolution, report: CriticalityReport | None = None, scenario: int = -1
) -> FeatureGraph:
    """Raw node and branch feature matrices for one solved scenario.

    Flow quantities are magnitudes at the branch from-end; direction is
    carried by the signed adjacency instead.
    """
    if not flow.converged:
        raise ValueError("features need a converged power flow")
    adj = signed_adjacency(case, flow)
    lg = line_graph(case)
    node = np.column_stack([
        adj.degree().astype(float),
        [b.p_load for b in case.buses],
        [b.q_load for b in case.buses],
        flow.vm,
        flow.va,
    ])
    branch = np.column_stack([
        lg.degree(),
        [br.x for br in case.branches],
        np.abs(flow.p_from),
        np.abs(flow.q_from),
        flow.loading,
        flow.loss,
    ])
    return FeatureGraph(
        node_features=node,
        branch_features=branch,
        node_neighbors=bus_neighbors(case),
        branch_neighbors=lg.neighbors,
        node_labels=None if report is None else report.node_labels.copy(),
        branch_labels=None if report is None else report.branch_labels.copy(),
        scenario=scenario,
    )


# -- normalization -----------------------------------------------------------


@dataclass
class FeatureScaler:
    node_min: np.ndarray
    node_max: np.ndarray
    branch_min: np.ndarray
    branch_max: np.ndarray

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> FeatureScaler:
        return cls(**{k: np.asarray(d[k], dtype=float) for k in ("node_min", "node_max", "branch_min", "branch_max")})


def _scale(x, lo, hi):
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - lo) / safe, 0.0)
    return np.clip(out, 0.0, 1.0)


def fit_normalizer(train_graphs) -> FeatureScaler:
    """Per-feature min/max over every row of every training graph."""
    train_graphs = list(train_graphs)
    if not train_graphs:
        raise ValueError("cannot fit a scaler on an empty training split")
    nodes = np.vstack([g.node_features for g in train_graphs])
    branches = np.vstack([g.branch_features for g in train_graphs])
    return FeatureScaler(nodes.min(0), nodes.max(0), branches.min(0), branches.max(0))


def apply_normalizer(scaler: FeatureScaler, graph: FeatureGraph) -> FeatureGraph:
    return replace(
        graph,
        node_features=_scale(graph.node_features, scaler.node_min, scaler.node_max),
        branch_features=_scale(graph.branch_features, scaler.branch_min, scaler.branch_max),
    )


# -- generation --------------------------------------------------------------


@dataclass(frozen=True)
class GenerationConfig:
    n_target: int = 100
    seed: int = 0
    lo: float = 0.8
    hi: float = 1.2
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER


@dataclass
class Dataset:
    graphs: list[FeatureGraph]
    scaler: FeatureScaler
    split: dict[str, list[int]]  # positions into ``graphs``
    config: GenerationConfig
    oracle: OracleConfig
    attempted: int = 0
    converged: int = 0
    discarded: int = 0
    extras: dict = field(default_factory=dict)

    def subset(self, name: str, normalized: bool = True) -> list[FeatureGraph]:
        out = [self.graphs[i] for i in self.split[name]]
        if normalized:
            out = [apply_normalizer(self.scaler, g) for g in out]
        return out

    def meta(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "generation": asdict(self.config),
            "oracle": self.oracle.to_dict(),
            "counts": {"attempted": self.attempted, "converged": self.converged, "discarded": self.discarded},
            "split": self.split,
            "node_features": list(NODE_FEATURES),
            "branch_features": list(BRANCH_FEATURES),
        }


def scenario_seed(seed: int, index: int) -> list[int]:
    return [int(seed), int(index)]


def solve_and_label(case: GridCase, oracle: OracleConfig, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Solve and label one case; ``None`` when the power flow does not converge."""
    flow = solve_ac(case, tol, max_iter)
    if not flow.converged:
        return None
    return flow, evaluate_case(case, flow, oracle)


def _make_scenario(args):
    base, cfg, oracle, index = args
    case = perturb_case(base, scenario_seed(cfg.seed, index), cfg.lo, cfg.hi)
    try:
        out = solve_and_label(case, oracle, cfg.tol, cfg.max_iter)
    except np.linalg.LinAlgError:
        out = None
    except RuntimeError:
        out = None
    if out is None:
        return index, None
    flow, report = out
    return index, extract_features(case, flow, report, scenario=index)


def split_indices(n: int, seed: int) -> dict[str, list[int]]:
    """Seeded 80/10/10 partition of ``range(n)``."""
    perm = np.random.default_rng([int(seed), 0x5EED]).permutation(n)
    n_train = round(SPLIT_FRACTIONS[0] * n)
    n_val = round(SPLIT_FRACTIONS[1] * n)
    return {
        "train": sorted(int(i) for i in perm[:n_train]),
        "val": sorted(int(i) for i in perm[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in perm[n_train + n_val:]),
    }


def generate_dataset(
    base: GridCase,
    config: GenerationConfig = GenerationConfig(),
    oracle: OracleConfig = OracleConfig(),
    jobs: int = 1,
    progress=None,
) -> Dataset:
    """Draw ``n_target`` perturbed scenarios, keep the converged ones, label and split them."""
    if config.n_target < 1:
        raise ValueError("n_target must be >= 1")
    if not solve_ac(base, config.tol, config.max_iter).converged:
        raise DatasetError("base case power flow does not converge")

    tasks = [(base, config, oracle, i) for i in range(config.n_target)]
    if jobs > 1:
        from multiprocessing import Pool

        with Pool(jobs) as pool:
            results = list(pool.imap(_make_scenario, tasks, chunksize=8))
    else:
        results = []
        for t in tasks:
            results.append(_make_scenario(t))
            if progress is not None:
                progress(len(results), config.n_target)
    results.sort(key=lambda r: r[0])
    graphs = [g for _, g in results if g is not None]
    if len(graphs) < 3:
        raise DatasetError(f"only {len(graphs)} scenarios converged; need at least 3 to split")
    split = split_indices(len(graphs), config.seed)
    scaler = fit_normalizer(graphs[i] for i in split["train"])
    ds = Dataset(
        graphs=graphs,
        scaler=scaler,
        split=split,
        config=config,
        oracle=oracle,
        attempted=config.n_target,
        converged=len(graphs),
        discarded=config.n_target - len(graphs),
    )
    log.info("generated %d scenarios (%d discarded)", ds.converged, ds.discarded)
    return ds


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "meta.json").write_text(json.dumps(ds.meta(), indent=2, sort_keys=True) + "\n")
    (d / "scaler.json").write_text(json.dumps(ds.scaler.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(d / "scenarios.jsonl", "w") as fh:
        for g in ds.graphs:
            fh.write(_dump(g.to_dict()) + "\n")
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(
            f"dataset schema version {meta.get('schema_version')} != supported {SCHEMA_VERSION}"
        )
    scaler = FeatureScaler.from_dict(json.loads((d / "scaler.json").read_text()))
    with open(d / "scenarios.jsonl") as fh:
        graphs = [FeatureGraph.from_dict(json.loads(line)) for line in fh if line.strip()]
    counts = meta["counts"]
    return Dataset(
        graphs=graphs,
        scaler=scaler,
        split={k: list(v) for k, v in meta["split"].items()},
        config=GenerationConfig(**meta["generation"]),
        oracle=OracleConfig.from_dict(meta["oracle"]),
        attempted=counts["attempted"],
        converged=counts["converged"],
        discarded=counts["discarded"],
    )


def majority_baseline(graphs, target: str) -> float:
    """Accuracy of always predicting the more common class."""
    labels = np.concatenate([g.labels(target) for g in graphs])
    ones = labels.mean()
    return float(max(ones, 1 - ones)) if math.isfinite(ones) else float("nan")
