"""Multi-head graph attention network with hand-written backward pass.

Three attention scorings are available for a query node ``i`` and a
neighbour ``j`` with projected features ``h = W x``:

``static``   ``LeakyReLU(a . [h_i || h_j])``
``dynamic``  ``a . LeakyReLU([h_i || h_j])`` (default)
``gatv2``    ``a . LeakyReLU(h_i + h_j)``

Every node attends over its neighbours and itself. Heads are averaged;
hidden layers use LeakyReLU, the output layer is linear into two logits
ordered (critical, non-critical).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from gridcrit.dataset import FeatureGraph, FeatureScaler, apply_normalizer

MODEL_SCHEMA_VERSION = 1
ATTENTION_MODES = ("static", "dynamic", "gatv2")
PROB_EPS = 1e-12


class TrainingDivergedError(RuntimeError):
    pass


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope):
    return np.where(x > 0, 1.0, slope)


def neighbor_mask(neighbors) -> np.ndarray:
    """Boolean attention mask with self loops from neighbour lists."""
    n = len(neighbors)
    mask = np.eye(n, dtype=bool)
    for i, nb in enumerate(neighbors):
        mask[i, list(nb)] = True
    return mask


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    s = np.where(mask, scores, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax2(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def attention_scores(H: np.ndarray, a: np.ndarray, slope: float, mode: str) -> np.ndarray:
    """Raw pairwise scores ``s[i, j]`` before the softmax."""
    if mode == "static":
        o = H.shape[1]
        return leaky_relu((H @ a[:o])[:, None] + (H @ a[o:])[None, :], slope)
    if mode == "dynamic":
        o = H.shape[1]
        G = leaky_relu(H, slope)
        return (G @ a[:o])[:, None] + (G @ a[o:])[None, :]
    if mode == "gatv2":
        return leaky_relu(H[:, None, :] + H[None, :, :], slope) @ a
    raise ValueError(f"unknown attention mode {mode!r}")


def attention_coeffs(x_i, neighbor_x, W, a, slope: float = 0.2, mode: str = "dynamic") -> np.ndarray:
    """Attention of query ``x_i`` over the rows of ``neighbor_x`` (its full neighbourhood)."""
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    X = np.atleast_2d(np.asarray(neighbor_x, dtype=float))
    if X.shape[0] == 1 and x_i.shape[0] != 1 and X.shape[1] == 1:
        X = X.T
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if X.shape[1] != W.shape[1] or x_i.shape[0] != W.shape[1]:
        raise ValueError("feature width does not match W")
    H = np.vstack([x_i @ W.T, X @ W.T])
    s = attention_scores(H, np.asarray(a, dtype=float), slope, mode)[0, 1:]
    e = np.exp(s - s.max())
    return e / e.sum()


# -- model -------------------------------------------------------------------


@dataclass(frozen=True)
class Hyper:
    layers: int = 2
    hidden: int = 8
    heads: int = 2
    slope: float = 0.2
    dropout: float = 0.0
    input_dropout: bool = False
    attention_dropout: bool = True
    lr: float = 0.01
    lr_decay: float = 1.0
    batch: int = 8
    average: bool = True
    weight_decay: float = 1e-3
    epochs: int = 200
    mode: str = "dynamic"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.mode not in ATTENTION_MODES:
            raise ValueError(f"mode must be one of {ATTENTION_MODES}")
        if self.batch < 1:
            raise ValueError("batch must be positive")
        if self.layers < 1 or self.heads < 1 or self.hidden < 1:
            raise ValueError("layers, heads and hidden must be positive")


@dataclass
class MgatModel:
    params: dict[str, np.ndarray]
    hyper: Hyper
    in_dim: int
    target: str = "nodes"
    scaler: FeatureScaler | None = None

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden] * (self.hyper.layers - 1) + [2]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def hidden(self) -> int:
        return self.hyper.hidden

    def copy(self) -> MgatModel:
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def to_dict(self) -> dict:
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "target": self.target,
            "in_dim": self.in_dim,
            "hyper": asdict(self.hyper),
            "params": {k: self.params[k].tolist() for k in sorted(self.params)},
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MgatModel:
        if d.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise ValueError(
                f"model schema version {d.get('schema_version')} != supported {MODEL_SCHEMA_VERSION}"
            )
        return cls(
            params={k: np.asarray(v, dtype=float) for k, v in d["params"].items()},
            hyper=Hyper(**d["hyper"]),
            in_dim=d["in_dim"],
            target=d["target"],
            scaler=None if d["scaler"] is None else FeatureScaler.from_dict(d["scaler"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> MgatModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_model(in_dim: int, hyper: Hyper = Hyper(), target: str = "nodes", scaler=None) -> MgatModel:
    """Glorot-uniform initialisation from ``hyper.seed``."""
    rng = np.random.default_rng([hyper.seed, 1])
    model = MgatModel({}, hyper, in_dim, target, scaler)
    for l, (fi, fo) in enumerate(model.layer_dims()):
        for h in range(hyper.heads):
            s = math.sqrt(6.0 / (fi + fo))
            model.params[f"L{l}.H{h}.W"] = rng.uniform(-s, s, (fo, fi))
            a_len = fo if hyper.mode == "gatv2" else 2 * fo
            s = math.sqrt(6.0 / (a_len + 1))
            model.params[f"L{l}.H{h}.a"] = rng.uniform(-s, s, a_len)
        model.params[f"L{l}.b"] = np.zeros(fo)
    return model


# -- forward / backward ------------------------------------------------------


def _head_forward(X, W, a, mask, slope, mode, att_keep, p):
    H = X @ W.T
    S = attention_scores(H, a, slope, mode)
    A = masked_softmax(S, mask)
    Ad = A if att_keep is None else A * att_keep / (1 - p)
    return Ad @ H, (H, S, A, Ad)


def layer_forward(X, mask, model: MgatModel, layer: int, training=False, rng=None):
    """One attention layer; returns (output, cache)."""
    hp = model.hyper
    p = hp.dropout if training else 0.0
    last = layer == hp.layers - 1
    in_keep = None
    if p > 0 and hp.input_dropout:
        in_keep = rng.random(X.shape) >= p
        Xd = X * in_keep / (1 - p)
    else:
        Xd = X
    heads = []
    Y = 0.0
    for h in range(hp.heads):
        W = model.params[f"L{layer}.H{h}.W"]
        a = model.params[f"L{layer}.H{h}.a"]
        if W.shape[1] != X.shape[1]:
            raise ValueError(f"layer {layer} expects width {W.shape[1]}, got {X.shape[1]}")
        att_keep = rng.random(mask.shape) >= p if p > 0 and hp.attention_dropout else None
        Z, hc = _head_forward(Xd, W, a, mask, hp.slope, hp.mode, att_keep, p)
        heads.append((hc, att_keep))
        Y = Y + Z
    Y = Y / hp.heads + model.params[f"L{layer}.b"]
    out = Y if last else leaky_relu(Y, hp.slope)
    return out, dict(X=X, Xd=Xd, in_keep=in_keep, heads=heads, Y=Y, p=p, last=last)


def model_forward(X, mask, model: MgatModel, training=False, rng=None):
    """Class probabilities (n x 2, column 0 = critical) and the forward cache."""
    if X.shape[1] != model.in_dim:
        raise ValueError(f"model expects {model.in_dim} features, got {X.shape[1]}")
    caches = []
    h = X
    for l in range(model.hyper.layers):
        h, c = layer_forward(h, mask, model, l, training, rng)
        caches.append(c)
    return softmax2(h), dict(layers=caches, logits=h, mask=mask)


def bce_loss(probs, labels) -> float:
    """Mean binary cross entropy of ``probs`` (probability of class 1)."""
    p = np.clip(np.asarray(probs, dtype=float), PROB_EPS, 1 - PROB_EPS)
    y = np.asarray(labels, dtype=float)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _scores_backward(dS, H, a, slope, mode):
    o = H.shape[1]
    if mode == "static":
        P = (H @ a[:o])[:, None] + (H @ a[o:])[None, :]
        dP = dS * leaky_relu_grad(P, slope)
        dp, dq = dP.sum(axis=1), dP.sum(axis=0)
        da = np.r_[H.T @ dp, H.T @ dq]
        dH = np.outer(dp, a[:o]) + np.outer(dq, a[o:])
        return dH, da
    if mode == "dynamic":
        G = leaky_relu(H, slope)
        du, dv = dS.sum(axis=1), dS.sum(axis=0)
        da = np.r_[G.T @ du, G.T @ dv]
        dG = np.outer(du, a[:o]) + np.outer(dv, a[o:])
        return dG * leaky_relu_grad(H, slope), da
    Zt = H[:, None, :] + H[None, :, :]
    da = np.einsum("ij,ijk->k", dS, leaky_relu(Zt, slope))
    dZ = dS[:, :, None] * a * leaky_relu_grad(Zt, slope)
    return dZ.sum(axis=1) + dZ.sum(axis=0), da


def backward(cache, model: MgatModel, labels) -> dict[str, np.ndarray]:
    """Gradients of the mean BCE w.r.t. every parameter (dropout masks fixed)."""
    hp = model.hyper
    logits = cache["logits"]
    mask = cache["mask"]
    y = np.asarray(labels, dtype=float)
    n = len(y)
    prob = softmax2(logits)[:, 0]
    inside = (prob > PROB_EPS) & (prob < 1 - PROB_EPS)
    safe = np.where(inside, prob, 0.5)
    dprob = np.where(inside, -(y / safe - (1 - y) / (1 - safe)) / n, 0.0)
    dz = dprob * prob * (1 - prob)
    dOut = np.column_stack([dz, -dz])
    grads: dict[str, np.ndarray] = {}
    for l in reversed(range(hp.layers)):
        c = cache["layers"][l]
        dY = dOut if c["last"] else dOut * leaky_relu_grad(c["Y"], hp.slope)
        grads[f"L{l}.b"] = dY.sum(axis=0)
        dY = dY / hp.heads
        dXd = 0.0
        for h, ((H, S, A, Ad), att_keep) in enumerate(c["heads"]):
            W = model.params[f"L{l}.H{h}.W"]
            a = model.params[f"L{l}.H{h}.a"]
            dH = Ad.T @ dY
            dAd = dY @ H.T
            dA = dAd if att_keep is None else dAd * att_keep / (1 - c["p"])
            dA = np.where(mask, dA, 0.0)
            dS = A * (dA - (dA * A).sum(axis=1, keepdims=True))
            dHs, da = _scores_backward(dS, H, a, hp.slope, hp.mode)
            dH = dH + dHs
            grads[f"L{l}.H{h}.W"] = dH.T @ c["Xd"]
            grads[f"L{l}.H{h}.a"] = da
            dXd = dXd + dH @ W
        if c["in_keep"] is not None:
            dXd = dXd * c["in_keep"] / (1 - c["p"])
        dOut = dXd
    return grads


def loss_and_grads(X, mask, model, labels, training=False, rng=None):
    probs, cache = model_forward(X, mask, model, training, rng)
    return bce_loss(probs[:, 0], labels), backward(cache, model, labels), probs


# -- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update applied in place; returns (params, state)."""
    state.t += 1
    c1 = 1 - beta1**state.t
    c2 = 1 - beta2**state.t
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# -- training ----------------------------------------------------------------


@dataclass
class TrainReport:
    epochs: list[dict]
    best_epoch: int
    hyper: Hyper
    target: str

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for row in self.epochs:
                w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["val_acc"])])

    def val_losses(self) -> np.ndarray:
        return np.array([r["val_loss"] for r in self.epochs])


def _prepared(graphs, target):
    return [(g.features(target), neighbor_mask(g.neighbors(target)), g.labels(target)) for g in graphs]


def evaluate_graphs(model: MgatModel, prepared) -> tuple[float, float]:
    """(mean loss, accuracy) without dropout."""
    losses, correct, total = [], 0, 0
    for X, mask, y in prepared:
        probs, _ = model_forward(X, mask, model)
        losses.append(bce_loss(probs[:, 0], y))
        pred = (probs[:, 0] > probs[:, 1]).astype(int)
        correct += int((pred == y).sum())
        total += len(y)
    return float(np.mean(losses)), correct / total


def train(dataset, target: str = "nodes", hyper: Hyper = Hyper(), log=None) -> tuple[MgatModel, TrainReport]:
    """Mini-batch Adam training (``hyper.batch`` scenarios per step); returns the best-validation-loss model."""
    if target not in ("nodes", "branches"):
        raise ValueError("target must be 'nodes' or 'branches'")
    train_set = _prepared(dataset.subset("train"), target)
    val_set = _prepared(dataset.subset("val"), target)
    if not train_set or not val_set:
        raise ValueError("training needs nonempty train and val splits")
    in_dim = train_set[0][0].shape[1]
    model = init_model(in_dim, hyper, target, dataset.scaler)
    rng = np.random.default_rng([hyper.seed, 2])
    state = AdamState()
    best, best_loss, best_epoch = model.copy(), math.inf, 0
    history = []
    for epoch in range(1, hyper.epochs + 1):
        lr = hyper.lr * hyper.lr_decay ** (epoch - 1)
        losses = []
        order = rng.permutation(len(train_set))
        avg = {k: np.zeros_like(v) for k, v in model.params.items()} if hyper.average else None
        steps = 0
        for start in range(0, len(order), hyper.batch):
            chunk = order[start:start + hyper.batch]
            total = None
            for i in chunk:
                X, mask, y = train_set[i]
                loss, grads, _ = loss_and_grads(X, mask, model, y, training=True, rng=rng)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, scenario {i}")
                losses.append(loss)
                if total is None:
                    total = grads
                else:
                    for key, g in grads.items():
                        total[key] += g
            for key, g in total.items():
                g /= len(chunk)
                if hyper.weight_decay:
                    # L2 penalty folded into the gradient; reported losses stay pure BCE
                    g += hyper.weight_decay * model.params[key]
            adam_step(model.params, total, state, lr)
            steps += 1
            if avg is not None:
                for key, v in model.params.items():
                    avg[key] += v
        # evaluate and checkpoint the epoch mean of the iterates when averaging
        current = model if avg is None else replace(model, params={k: v / steps for k, v in avg.items()})
        val_loss, val_acc = evaluate_graphs(current, val_set)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        row = dict(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=val_loss, val_acc=val_acc)
        history.append(row)
        if log is not None:
            log(row)
        if val_loss < best_loss:
            best, best_loss, best_epoch = current.copy(), val_loss, epoch
    return best, TrainReport(history, best_epoch, hyper, target)


def identify(model: MgatModel, graph: FeatureGraph, normalize: bool = True):
    """Predicted labels (1 = critical) and class probabilities for one graph.

    ``normalize`` applies the model's stored scaler to raw features first.
    """
    if normalize and model.scaler is not None:
        graph = apply_normalizer(model.scaler, graph)
    X = graph.features(model.target)
    probs, _ = model_forward(X, neighbor_mask(graph.neighbors(model.target)), model)
    return (probs[:, 0] > probs[:, 1]).astype(np.int8), probs
