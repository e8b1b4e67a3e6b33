"""Confusion-matrix scores and oracle-versus-model timing."""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass(frozen=True)
class MetricScores:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(predicted, actual) -> ConfusionMatrix:
    """Tally a binary confusion matrix with 1 as the positive (critical) class."""
    p = np.asarray(predicted).astype(bool)
    a = np.asarray(actual).astype(bool)
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {a.shape}")
    return ConfusionMatrix(
        tp=int(np.sum(p & a)),
        fp=int(np.sum(p & ~a)),
        fn=int(np.sum(~p & a)),
        tn=int(np.sum(~p & ~a)),
    )


def scores(cm: ConfusionMatrix) -> MetricScores:
    """Accuracy, precision, recall and F1 in percent.

    Undefined precision or recall (zero denominator) is reported as 0, and F1
    is 0 when both are 0.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    acc = (cm.tp + cm.tn) / cm.total
    pre = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    rec = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    f1 = 2 * pre * rec / (pre + rec) if pre + rec else 0.0
    return MetricScores(100 * acc, 100 * pre, 100 * rec, 100 * f1)


def format_table(columns: dict[str, MetricScores]) -> str:
    """Plain-text table with one column per classifier, two decimals."""
    names = list(columns)
    rows = [("accuracy", "accuracy"), ("precision", "precision"), ("recall", "recall"), ("F1", "f1")]
    width = max([10] + [len(n) for n in names])
    lines = ["metric".ljust(10) + "".join(n.rjust(width + 2) for n in names)]
    for label, attr in rows:
        cells = "".join(f"{getattr(columns[n], attr):.2f}%".rjust(width + 2) for n in names)
        lines.append(label.ljust(10) + cells)
    return "\n".join(lines)


@dataclass
class TimingReport:
    n_scenarios: int
    oracle_seconds: float
    model_seconds: float
    feature_seconds: float
    inference_seconds: float
    speedup: float | None
    label_digest: str | None = None  # sha256 over the oracle labels, in scenario order

    def to_dict(self) -> dict:
        return asdict(self)


def timing_comparison(base, models, n_scenarios: int = 200, seed: int = 0, oracle=None, lo=0.8, hi=1.2):
    """Wall-clock of full oracle labelling vs power flow + features + inference.

    Both paths see the same perturbed scenarios. The oracle phase runs first
    and to completion before the model phase; scenarios that fail to converge
    are skipped in both. ``models`` is one model or a list (e.g. node and
    branch classifiers), each applied to every scenario.
    """
    from gridcrit.dataset import extract_features, perturb_case, scenario_seed
    from gridcrit.mgat import identify
    from gridcrit.oracle import OracleConfig, evaluate_case
    from gridcrit.powerflow import solve_ac

    if not isinstance(models, (list, tuple)):
        models = [models]
    oracle = oracle or OracleConfig()
    cases = [perturb_case(base, scenario_seed(seed, i), lo, hi) for i in range(n_scenarios)]
    if not cases:
        return TimingReport(0, 0.0, 0.0, 0.0, 0.0, None)

    t0 = time.perf_counter()
    reports = []
    for c in cases:
        flow = solve_ac(c)
        reports.append(evaluate_case(c, flow, oracle) if flow.converged else None)
    oracle_s = time.perf_counter() - t0

    feat_s = infer_s = 0.0
    for c, rep in zip(cases, reports):
        if rep is None:
            continue
        t0 = time.perf_counter()
        graph = extract_features(c, solve_ac(c))
        t1 = time.perf_counter()
        for m in models:
            identify(m, graph)
        t2 = time.perf_counter()
        feat_s += t1 - t0
        infer_s += t2 - t1
    model_s = feat_s + infer_s
    digest = hashlib.sha256()
    for rep in reports:
        if rep is not None:
            digest.update(rep.node_labels.astype(np.int8).tobytes())
            digest.update(rep.branch_labels.astype(np.int8).tobytes())
    return TimingReport(
        n_scenarios=len(cases),
        oracle_seconds=oracle_s,
        model_seconds=model_s,
        feature_seconds=feat_s,
        inference_seconds=infer_s,
        speedup=oracle_s / model_s if model_s > 0 else None,
        label_digest=digest.hexdigest(),
    )
