"""Plan featurization and the shared-tower pairwise plan comparator.

Everything here is plain numpy: forward passes are batched by concatenating
the node matrices of many trees, and gradients are computed by hand.
"""
from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .plan import OPERATORS, PlanTree

EPS = 1e-7
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Bounds:
    """Min-max normalization ranges frozen alongside a model."""

    log_card_min: float = 0.0
    log_card_max: float = math.log(1e9)
    width_min: float = 0.0
    width_max: float = 256.0

    @classmethod
    def fit(cls, cards, widths) -> "Bounds":
        logs = np.log(np.maximum(np.asarray(cards, dtype=float), 1.0))
        widths = np.asarray(widths, dtype=float)
        return cls(float(logs.min()), float(logs.max()), float(widths.min()), float(widths.max()))

    def norm_card(self, rows: float) -> float:
        return _minmax(math.log(max(rows, 1.0)), self.log_card_min, self.log_card_max)

    def norm_width(self, width: float) -> float:
        return _minmax(width, self.width_min, self.width_max)


def _minmax(v, lo, hi):
    if hi <= lo:
        return 0.0
    return min(1.0, max(0.0, (v - lo) / (hi - lo)))


@dataclass
class FeatureTree:
    """Node vectors in pre-order; ``left``/``right`` index children, -1 if absent."""

    x: np.ndarray
    left: np.ndarray
    right: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.x)

    def __eq__(self, other):
        return (isinstance(other, FeatureTree) and np.array_equal(self.x, other.x)
                and np.array_equal(self.left, other.left) and np.array_equal(self.right, other.right))


def feature_width(num_tables: int) -> int:
    return len(OPERATORS) + 2 + num_tables


def featurize(plan: PlanTree, est, bounds: Bounds, table_order: Sequence[str]) -> FeatureTree:
    """One-hot operator, normalized log cardinality, normalized row width, table bitmap.

    ``est`` supplies cardinalities (``None`` reads the plan annotations).
    Estimated cost is never a feature.
    """
    tindex = {t: i for i, t in enumerate(table_order)}
    nodes = list(plan.nodes())
    pos = {id(n): i for i, n in enumerate(nodes)}
    width = feature_width(len(table_order))
    x = np.zeros((len(nodes), width))
    left = np.full(len(nodes), -1, dtype=np.int64)
    right = np.full(len(nodes), -1, dtype=np.int64)
    for i, node in enumerate(nodes):
        try:
            x[i, OPERATORS.index(node.op)] = 1.0
        except ValueError:
            raise ValueError(f"unknown operator {node.op!r}") from None
        rows = node.est_rows if est is None else est.estimate(node.subquery)
        x[i, len(OPERATORS)] = bounds.norm_card(rows)
        x[i, len(OPERATORS) + 1] = bounds.norm_width(_row_width(node, est))
        for t in node.tables:
            x[i, len(OPERATORS) + 2 + tindex[t]] = 1.0
        if not node.is_scan:
            left[i] = pos[id(node.left)]
            right[i] = pos[id(node.right)]
    return FeatureTree(x, left, right)


def _row_width(node: PlanTree, est) -> float:
    if est is None or not hasattr(est, "row_width"):
        return node.row_width
    return float(sum(est.row_width(t) for t in node.tables))


# -- activations -------------------------------------------------------------

def _act(name, z):
    if name == "leaky_relu":
        return np.where(z > 0, z, 0.01 * z)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, a):
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, 0.01)
    return 1.0 - a * a


@dataclass
class ModelConfig:
    in_width: int
    conv_channels: tuple = (64, 32, 16)
    fc_hidden: tuple = (8,)
    dim: int = 1
    activation: str = "tanh"


class ComparatorModel:
    """Tree-convolution plan embedding shared by both inputs, plus a comparison layer.

    There is exactly one parameter set; both sides of a comparison run through
    it, so their gradients add up on the same arrays.
    """

    def __init__(self, config: ModelConfig, bounds: Optional[Bounds] = None,
                 table_order: Sequence[str] = (), seed: int = 0, cold_start: bool = False):
        self.config = config
        self.bounds = bounds or Bounds()
        self.table_order = tuple(table_order)
        self.operators = OPERATORS
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        c_in = config.in_width
        for i, c_out in enumerate(config.conv_channels):
            scale = 1.0 / math.sqrt(3 * c_in)
            for part in ("Wp", "Wl", "Wr"):
                self.params[f"conv{i}.{part}"] = rng.normal(0.0, scale, (c_in, c_out))
            self.params[f"conv{i}.b"] = np.zeros(c_out)
            c_in = c_out
        sizes = list(config.fc_hidden) + [config.dim]
        for i, c_out in enumerate(sizes):
            self.params[f"fc{i}.W"] = rng.normal(0.0, 1.0 / math.sqrt(c_in), (c_in, c_out))
            self.params[f"fc{i}.b"] = np.zeros(c_out)
            c_in = c_out
        if config.dim > 1:
            self.params["cmp.w"] = np.zeros(2 * config.dim)
        if cold_start and config.dim == 1:
            # every plan embeds to the same point until the first update; for
            # dim > 1 the zero comparison weights already tie every pair, and
            # zeroing the embeddings too would leave all gradients at zero
            last = len(sizes) - 1
            self.params[f"fc{last}.W"][:] = 0.0
            self.params[f"fc{last}.b"][:] = 0.0

    @property
    def dim(self) -> int:
        return self.config.dim

    def copy(self) -> "ComparatorModel":
        return copy.deepcopy(self)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- forward / backward ----------------------------------------------------

    def _stack(self, trees: Sequence[FeatureTree]):
        for t in trees:
            if t.x.shape[1] != self.config.in_width:
                raise ValueError(
                    f"feature width {t.x.shape[1]} does not match model width {self.config.in_width}"
                )
        sizes = np.array([t.num_nodes for t in trees])
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        total = int(sizes.sum())
        x = np.concatenate([t.x for t in trees], axis=0)
        left = np.concatenate([np.where(t.left >= 0, t.left + s, total) for t, s in zip(trees, starts)])
        right = np.concatenate([np.where(t.right >= 0, t.right + s, total) for t, s in zip(trees, starts)])
        return x, left, right, starts, sizes

    def _forward(self, trees):
        x, left, right, starts, sizes = self._stack(trees)
        act = self.config.activation
        h = x
        conv_cache = []
        for i in range(len(self.config.conv_channels)):
            p = self.params
            hp = np.vstack([h, np.zeros((1, h.shape[1]))])
            hl, hr = hp[left], hp[right]
            z = h @ p[f"conv{i}.Wp"] + hl @ p[f"conv{i}.Wl"] + hr @ p[f"conv{i}.Wr"] + p[f"conv{i}.b"]
            a = _act(act, z)
            conv_cache.append((h, hl, hr, z, a))
            h = a
        pooled = np.maximum.reduceat(h, starts, axis=0)
        seg = np.repeat(np.arange(len(starts)), sizes)
        rows = np.arange(len(h))[:, None]
        # first node attaining the per-channel max of its tree
        cand = np.where(h == pooled[seg], rows, len(h))
        argmax = np.minimum.reduceat(cand, starts, axis=0)
        fc_cache = []
        v = pooled
        n_fc = len(self.config.fc_hidden) + 1
        for i in range(n_fc):
            z = v @ self.params[f"fc{i}.W"] + self.params[f"fc{i}.b"]
            a = _act(act, z) if i < n_fc - 1 else z
            fc_cache.append((v, z, a))
            v = a
        cache = dict(left=left, right=right, argmax=argmax, n_nodes=len(x),
                     conv=conv_cache, fc=fc_cache)
        return v, cache

    def embed(self, trees: Sequence[FeatureTree]) -> np.ndarray:
        """Embeddings of shape ``(len(trees), dim)``."""
        return self._forward(list(trees))[0]

    def _backward(self, d_emb, cache, grads):
        act = self.config.activation
        n_fc = len(self.config.fc_hidden) + 1
        g = d_emb
        for i in reversed(range(n_fc)):
            v, z, a = cache["fc"][i]
            if i < n_fc - 1:
                g = g * _act_grad(act, z, a)
            grads[f"fc{i}.W"] += v.T @ g
            grads[f"fc{i}.b"] += g.sum(axis=0)
            g = g @ self.params[f"fc{i}.W"].T
        # max pooling: route to the first argmax node per channel
        n = cache["n_nodes"]
        gh = np.zeros((n, g.shape[1]))
        # (node, channel) targets never collide: each tree owns distinct nodes
        gh[cache["argmax"], np.arange(g.shape[1])[None, :]] = g
        left, right = cache["left"], cache["right"]
        for i in reversed(range(len(self.config.conv_channels))):
            h, hl, hr, z, a = cache["conv"][i]
            gz = gh * _act_grad(act, z, a)
            p = self.params
            grads[f"conv{i}.Wp"] += h.T @ gz
            grads[f"conv{i}.Wl"] += hl.T @ gz
            grads[f"conv{i}.Wr"] += hr.T @ gz
            grads[f"conv{i}.b"] += gz.sum(axis=0)
            if i == 0:
                break
            # a node is the left (or right) child of at most one parent, so
            # only the discarded padding row can receive repeated writes
            gpad = np.zeros((n + 1, h.shape[1]))
            gpad[left] += gz @ p[f"conv{i}.Wl"].T
            gpad[right] += gz @ p[f"conv{i}.Wr"].T
            gh = gz @ p[f"conv{i}.Wp"].T + gpad[:n]
        return grads

    # -- comparison ----------------------------------------------------------

    def compare_embeddings(self, e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
        """Probability that the second plan is preferable, row-wise."""
        return expit(self._logit(np.atleast_2d(e1), np.atleast_2d(e2)))

    def _logit(self, e1, e2):
        if self.dim == 1:
            return e1[:, 0] - e2[:, 0]
        return np.concatenate([e1, e2], axis=1) @ self.params["cmp.w"]

    def compare(self, p1: FeatureTree, p2: FeatureTree) -> float:
        e = self.embed([p1, p2])
        return float(self.compare_embeddings(e[:1], e[1:])[0])

    # -- checkpoints ---------------------------------------------------------

    def save(self, path) -> None:
        meta = dict(
            version=CHECKPOINT_VERSION,
            config={**asdict(self.config),
                    "conv_channels": list(self.config.conv_channels),
                    "fc_hidden": list(self.config.fc_hidden)},
            bounds=asdict(self.bounds),
            table_order=list(self.table_order),
            operators=list(self.operators),
            param_order=list(self.params),
        )
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **self.params)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "ComparatorModel":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            cfg = meta["config"]
            config = ModelConfig(cfg["in_width"], tuple(cfg["conv_channels"]),
                                 tuple(cfg["fc_hidden"]), cfg["dim"], cfg["activation"])
            model = cls(config, Bounds(**meta["bounds"]), meta["table_order"])
            model.params = {k: z[k].copy() for k in meta["param_order"]}
            model.operators = tuple(meta["operators"])
        return model


@dataclass
class PlanPairExample:
    plan_i: FeatureTree
    plan_j: FeatureTree
    label: int  # 1 iff latency(plan_i) > latency(plan_j)


def _unique_trees(batch: Sequence[PlanPairExample]):
    trees, index = [], {}
    pairs = []
    for ex in batch:
        ij = []
        for t in (ex.plan_i, ex.plan_j):
            k = id(t)
            if k not in index:
                index[k] = len(trees)
                trees.append(t)
            ij.append(index[k])
        pairs.append(ij)
    return trees, np.array(pairs, dtype=np.int64), np.array([ex.label for ex in batch], dtype=float)


def _loss_from_logits(logit, labels):
    p = expit(logit)
    pc = np.clip(p, EPS, 1.0 - EPS)
    losses = -(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc))
    return losses, p, pc


def pairwise_loss(batch: Sequence[PlanPairExample], model: ComparatorModel) -> float:
    """Mean cross-entropy of the comparator over a batch of labeled plan pairs."""
    if not batch:
        raise ValueError("empty batch")
    trees, pairs, labels = _unique_trees(batch)
    emb = model.embed(trees)
    losses, _, _ = _loss_from_logits(model._logit(emb[pairs[:, 0]], emb[pairs[:, 1]]), labels)
    return float(losses.mean())


def gradients(batch: Sequence[PlanPairExample], model: ComparatorModel):
    """Loss and exact gradients for every parameter (shared towers summed)."""
    if not batch:
        raise ValueError("empty batch")
    trees, pairs, labels = _unique_trees(batch)
    emb, cache = model._forward(trees)
    e1, e2 = emb[pairs[:, 0]], emb[pairs[:, 1]]
    logit = model._logit(e1, e2)
    losses, p, pc = _loss_from_logits(logit, labels)
    b = len(batch)
    # derivative through the clamp is zero where it is active
    inside = (p > EPS) & (p < 1.0 - EPS)
    dl_dp = -(labels / pc - (1.0 - labels) / (1.0 - pc)) / b
    dlogit = np.where(inside, dl_dp * p * (1.0 - p), 0.0)
    grads = model.zero_grads()
    d_emb = np.zeros_like(emb)
    if model.dim == 1:
        np.add.at(d_emb[:, 0], pairs[:, 0], dlogit)
        np.add.at(d_emb[:, 0], pairs[:, 1], -dlogit)
    else:
        w = model.params["cmp.w"]
        d = model.dim
        np.add.at(d_emb, pairs[:, 0], dlogit[:, None] * w[None, :d])
        np.add.at(d_emb, pairs[:, 1], dlogit[:, None] * w[None, d:])
        grads["cmp.w"] += (dlogit[:, None] * np.concatenate([e1, e2], axis=1)).sum(axis=0)
    model._backward(d_emb, cache, grads)
    return float(losses.mean()), grads


def regression_gradients(trees: Sequence[FeatureTree], targets: np.ndarray, model: ComparatorModel):
    """Mean squared error of scalar embeddings against ``targets``, with gradients."""
    emb, cache = model._forward(list(trees))
    diff = emb[:, 0] - np.asarray(targets, dtype=float)
    grads = model.zero_grads()
    d_emb = (2.0 * diff / len(diff))[:, None]
    model._backward(d_emb, cache, grads)
    return float((diff ** 2).mean()), grads


@dataclass
class SGD:
    lr: float = 1e-3
    momentum: float = 0.0
    _velocity: dict = field(default_factory=dict, repr=False)

    def step(self, model: ComparatorModel, grads) -> None:
        for k, g in grads.items():
            if self.momentum:
                v = self._velocity.get(k)
                v = g if v is None else self.momentum * v + g
                self._velocity[k] = v
                g = v
            model.params[k] -= self.lr * g


def expected_random_wins(emb: np.ndarray, model: ComparatorModel) -> np.ndarray:
    """For each i, sum over j != i of compare(P_j, P_i)."""
    n = len(emb)
    wins = np.zeros(n)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        if others:
            wins[i] = model.compare_embeddings(emb[others], np.repeat(emb[i:i + 1], len(others), axis=0)).sum()
    return wins


def select_best_index(trees: Sequence[FeatureTree], model: ComparatorModel) -> int:
    if not trees:
        raise ValueError("no candidates to select from")
    emb = model.embed(list(trees))
    if model.dim == 1:
        return int(np.argmin(emb[:, 0]))
    return int(np.argmax(expected_random_wins(emb, model)))


def select_best(candidates, model: ComparatorModel, est) -> PlanTree:
    """Pick the preferred plan of a candidate list under ``model``."""
    plans = list(candidates)
    trees = [featurize(p, est, model.bounds, model.table_order) for p in plans]
    return plans[select_best_index(trees, model)]
