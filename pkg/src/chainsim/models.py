"""Trainable per-node functions and synthetic chain construction.

Two model families live here: small three-layer perceptrons (the trainable
function attached to each graph node) and basis-function linear models (a
frozen nonlinear feature map with a learned linear head). The module also
generates the synthetic data used throughout and assembles complete inverted
m-ary tree chains where every node holds its own trained perceptron.

Perceptron layout: two hidden layers (ReLU then batch-norm after each) and a
scalar sigmoid output. ``forward`` always runs in evaluation mode, using the
frozen running batch-norm statistics, so it is a pure function; batch
statistics are only consumed and updated inside the training loop.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numba
import numpy as np

from .graph import NodeRecord, SupplyChainGraph
from .rng import mix_seed, rng_from

CHECKPOINT_FORMAT = "chainsim-mlp"
CHECKPOINT_VERSION = 1

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1
_ADAM_BETAS = (0.9, 0.999)
_ADAM_EPS = 1e-8


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically safe sigmoid with output strictly inside (0, 1).

    Logits are clamped to +-36, past which float64 would round the result to
    exactly 0 or 1.
    """
    return 1.0 / (1.0 + np.exp(-np.clip(z, -36.0, 36.0)))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Feature matrix plus optional binary labels / sensitive attribute."""

    features: np.ndarray
    labels: np.ndarray | None = None
    sensitive: np.ndarray | None = None
    group: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n = self.features.shape[0]
        for name in ("labels", "sensitive", "group"):
            col = getattr(self, name)
            if col is None:
                continue
            col = np.asarray(col)
            if col.shape[0] != n:
                raise ValueError(f"{name} has {col.shape[0]} rows, features have {n}")
            setattr(self, name, col)
        if self.labels is not None and not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")

    def __len__(self) -> int:
        return self.features.shape[0]


def generate_features(n: int, rho: int, seed: int) -> Dataset:
    """Draw ``n`` points from an equal-weight mixture of two isotropic unit-
    variance Gaussians whose centers are uniform in the unit hypercube."""
    if n < 1 or rho < 1:
        raise ValueError("n and rho must be >= 1")
    rng = rng_from(seed, "features")
    centers = rng.uniform(0.0, 1.0, size=(2, rho))
    comp = rng.integers(0, 2, size=n)
    x = centers[comp] + rng.standard_normal((n, rho))
    return Dataset(features=x)


def generate_labels(features: np.ndarray, seed: int, noise_sd: float = 0.1) -> np.ndarray:
    """Binary labels from a noisy random quadratic score.

    score = sigmoid(x' A x + b . x + c + eps) with all coefficients uniform in
    [-1, 1] and eps ~ N(0, noise_sd^2); the label is 1 iff score >= 0.5.
    """
    features = np.asarray(features, dtype=float)
    if features.size == 0:
        raise ValueError("features must be non-empty")
    n, rho = features.shape
    rng = rng_from(seed, "labels")
    quad = rng.uniform(-1.0, 1.0, size=(rho, rho))
    lin = rng.uniform(-1.0, 1.0, size=rho)
    const = rng.uniform(-1.0, 1.0)
    eps = rng.normal(0.0, noise_sd, size=n) if noise_sd > 0 else np.zeros(n)
    raw = np.einsum("ni,ij,nj->n", features, quad, features) + features @ lin + const + eps
    return (sigmoid(raw) >= 0.5).astype(np.int64)


# ---------------------------------------------------------------------------
# perceptron node model
# ---------------------------------------------------------------------------


class MlpModel:
    """Three-layer perceptron with per-hidden-layer batch-norm, scalar output."""

    def __init__(self, input_dim: int, hidden1: int, hidden2: int, seed: int = 0):
        if min(input_dim, hidden1, hidden2) < 1:
            raise ValueError("all layer widths must be >= 1")
        self.input_dim = input_dim
        self.hidden = (hidden1, hidden2)
        rng = rng_from(seed, "mlp-init")
        self.w1, self.b1 = _init_linear(rng, input_dim, hidden1)
        self.w2, self.b2 = _init_linear(rng, hidden1, hidden2)
        self.w3, self.b3 = _init_linear(rng, hidden2, 1)
        self.bn1_gamma = np.ones(hidden1)
        self.bn1_beta = np.zeros(hidden1)
        self.bn1_mean = np.zeros(hidden1)
        self.bn1_var = np.ones(hidden1)
        self.bn2_gamma = np.ones(hidden2)
        self.bn2_beta = np.zeros(hidden2)
        self.bn2_mean = np.zeros(hidden2)
        self.bn2_var = np.ones(hidden2)
        self.loss_curve_: list[float] = []

    _PARAM_NAMES = (
        "w1", "b1", "bn1_gamma", "bn1_beta",
        "w2", "b2", "bn2_gamma", "bn2_beta",
        "w3", "b3",
    )
    _STATE_NAMES = _PARAM_NAMES + ("bn1_mean", "bn1_var", "bn2_mean", "bn2_var")

    def parameters(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self._PARAM_NAMES]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate a batch ``(n, input_dim)`` to probabilities ``(n,)``.

        Pure function: uses frozen running batch-norm statistics.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {x.shape[1]}")
        h = np.maximum(x @ self.w1 + self.b1, 0.0)
        h = (h - self.bn1_mean) / np.sqrt(self.bn1_var + _BN_EPS) * self.bn1_gamma + self.bn1_beta
        h = np.maximum(h @ self.w2 + self.b2, 0.0)
        h = (h - self.bn2_mean) / np.sqrt(self.bn2_var + _BN_EPS) * self.bn2_gamma + self.bn2_beta
        return sigmoid((h @ self.w3 + self.b3)[:, 0])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


class AdamState:
    """Adam moment buffers for a fixed parameter list."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3):
        self.lr = lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        b1, b2 = _ADAM_BETAS
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + _ADAM_EPS)


def epochs_for_level(level: int) -> int:
    return math.ceil(15.0 * math.sqrt(level))


def samples_for_level(level: int) -> int:
    return math.ceil(1000.0 * math.sqrt(level))


@numba.njit(cache=True)
def _bn_forward_inplace(act, mask, gamma_row, beta_row, rm_row, rv_row,
                        xhat, inv, eps, mom):
    """Batch-norm training forward for one model: normalizes ``act`` in place
    (already ReLU-ed), fills ``xhat``/``inv`` caches, updates running stats."""
    b, h = act.shape
    fb = np.float32(b)
    for c in range(h):
        s = np.float32(0.0)
        sq = np.float32(0.0)
        for r in range(b):
            val = act[r, c]
            s += val
            sq += val * val
        mean = s / fb
        var = sq / fb - mean * mean
        if var < np.float32(0.0):
            var = np.float32(0.0)
        iv = np.float32(1.0) / np.sqrt(var + eps)
        inv[c] = iv
        rm_row[c] = (np.float32(1.0) - mom) * rm_row[c] + mom * mean
        rv_row[c] = (np.float32(1.0) - mom) * rv_row[c] + mom * var
        g = gamma_row[c]
        be = beta_row[c]
        for r in range(b):
            xh = (act[r, c] - mean) * iv
            xhat[r, c] = xh
            act[r, c] = xh * g + be
    return


@numba.njit(cache=True)
def _bn_backward_inplace(dout, gamma_row, xhat, inv, mask, dgamma_row, dbeta_row):
    """Batch-norm + ReLU backward for one model: maps ``dout`` (gradient at the
    normalized output) in place to the gradient at the pre-ReLU input."""
    b, h = dout.shape
    fb = np.float32(b)
    for c in range(h):
        dg = np.float32(0.0)
        db = np.float32(0.0)
        s1 = np.float32(0.0)
        s2 = np.float32(0.0)
        g = gamma_row[c]
        for r in range(b):
            d = dout[r, c]
            dg += d * xhat[r, c]
            db += d
            dx = d * g
            dout[r, c] = dx
            s1 += dx
            s2 += dx * xhat[r, c]
        dgamma_row[c] = dg
        dbeta_row[c] = db
        scale = inv[c] / fb
        for r in range(b):
            dr = scale * (fb * dout[r, c] - s1 - xhat[r, c] * s2)
            dout[r, c] = dr if mask[r, c] else np.float32(0.0)
    return


@numba.njit(cache=True)
def _train_level_kernel(xs, ys, perms, theta, mbuf, vbuf, rm1, rv1, rm2, rv2,
                        din, h1, h2, batch_size, lr, bn_eps, bn_mom,
                        beta1, beta2, adam_eps, totals):
    """Full training loop for K same-shape models; everything float32.

    ``theta`` packs each parameter's K-stack contiguously in the order of
    ``MlpModel._PARAM_NAMES``; ``mbuf``/``vbuf`` are the Adam moments over the
    same layout and ``totals`` (epochs, K) receives summed per-epoch losses.
    """
    k_models = xs.shape[0]
    n = xs.shape[1]
    epochs = perms.shape[0]
    o0 = 0
    o1 = o0 + k_models * din * h1
    o2 = o1 + k_models * h1
    o3 = o2 + k_models * h1
    o4 = o3 + k_models * h1
    o5 = o4 + k_models * h1 * h2
    o6 = o5 + k_models * h2
    o7 = o6 + k_models * h2
    o8 = o7 + k_models * h2
    o9 = o8 + k_models * h2
    o10 = o9 + k_models
    w1 = theta[o0:o1].reshape((k_models, din, h1))
    b1 = theta[o1:o2].reshape((k_models, h1))
    g1 = theta[o2:o3].reshape((k_models, h1))
    be1 = theta[o3:o4].reshape((k_models, h1))
    w2 = theta[o4:o5].reshape((k_models, h1, h2))
    b2 = theta[o5:o6].reshape((k_models, h2))
    g2 = theta[o6:o7].reshape((k_models, h2))
    be2 = theta[o7:o8].reshape((k_models, h2))
    w3 = theta[o8:o9].reshape((k_models, h2))
    b3 = theta[o9:o10]
    grads = np.zeros(theta.shape[0], dtype=np.float32)
    gw1 = grads[o0:o1].reshape((k_models, din, h1))
    gb1 = grads[o1:o2].reshape((k_models, h1))
    gg1 = grads[o2:o3].reshape((k_models, h1))
    gbe1 = grads[o3:o4].reshape((k_models, h1))
    gw2 = grads[o4:o5].reshape((k_models, h1, h2))
    gb2 = grads[o5:o6].reshape((k_models, h2))
    gg2 = grads[o6:o7].reshape((k_models, h2))
    gbe2 = grads[o7:o8].reshape((k_models, h2))
    gw3 = grads[o8:o9].reshape((k_models, h2))
    gb3 = grads[o9:o10]

    t = 0
    for e in range(epochs):
        for start in range(0, n, batch_size):
            stop = min(n, start + batch_size)
            b = stop - start
            fb = np.float32(b)
            t += 1
            for k in range(k_models):
                xb = np.empty((b, din), dtype=np.float32)
                yb = np.empty(b, dtype=np.float32)
                for r in range(b):
                    src = perms[e, k, start + r]
                    yb[r] = ys[k, src]
                    for c in range(din):
                        xb[r, c] = xs[k, src, c]

                z1 = np.dot(xb, w1[k])
                mask1 = np.empty((b, h1), dtype=np.bool_)
                for r in range(b):
                    for c in range(h1):
                        val = z1[r, c] + b1[k, c]
                        pos = val > np.float32(0.0)
                        mask1[r, c] = pos
                        z1[r, c] = val if pos else np.float32(0.0)
                xhat1 = np.empty((b, h1), dtype=np.float32)
                inv1 = np.empty(h1, dtype=np.float32)
                _bn_forward_inplace(z1, mask1, g1[k], be1[k], rm1[k], rv1[k],
                                    xhat1, inv1, bn_eps, bn_mom)

                z2 = np.dot(z1, w2[k])
                mask2 = np.empty((b, h2), dtype=np.bool_)
                for r in range(b):
                    for c in range(h2):
                        val = z2[r, c] + b2[k, c]
                        pos = val > np.float32(0.0)
                        mask2[r, c] = pos
                        z2[r, c] = val if pos else np.float32(0.0)
                xhat2 = np.empty((b, h2), dtype=np.float32)
                inv2 = np.empty(h2, dtype=np.float32)
                _bn_forward_inplace(z2, mask2, g2[k], be2[k], rm2[k], rv2[k],
                                    xhat2, inv2, bn_eps, bn_mom)

                dz3 = np.empty(b, dtype=np.float32)
                loss = np.float32(0.0)
                for r in range(b):
                    logit = b3[k]
                    for c in range(h2):
                        logit += z2[r, c] * w3[k, c]
                    # float32 sigmoid saturates to exactly 0/1 past ~|15|
                    if logit > np.float32(15.0):
                        logit = np.float32(15.0)
                    elif logit < np.float32(-15.0):
                        logit = np.float32(-15.0)
                    p = np.float32(1.0) / (np.float32(1.0) + np.exp(-logit))
                    y = yb[r]
                    loss -= y * np.log(p) + (np.float32(1.0) - y) * np.log(
                        np.float32(1.0) - p)
                    dz3[r] = (p - y) / fb
                totals[e, k] += loss

                for c in range(h2):
                    acc = np.float32(0.0)
                    for r in range(b):
                        acc += z2[r, c] * dz3[r]
                    gw3[k, c] = acc
                acc3 = np.float32(0.0)
                for r in range(b):
                    acc3 += dz3[r]
                gb3[k] = acc3
                dh2 = np.empty((b, h2), dtype=np.float32)
                for r in range(b):
                    d = dz3[r]
                    for c in range(h2):
                        dh2[r, c] = d * w3[k, c]
                _bn_backward_inplace(dh2, g2[k], xhat2, inv2, mask2, gg2[k], gbe2[k])

                z1t = z1.T.copy()
                np.dot(z1t, dh2, gw2[k])
                for c in range(h2):
                    acc = np.float32(0.0)
                    for r in range(b):
                        acc += dh2[r, c]
                    gb2[k, c] = acc
                w2t = w2[k].T.copy()
                dh1 = np.dot(dh2, w2t)
                _bn_backward_inplace(dh1, g1[k], xhat1, inv1, mask1, gg1[k], gbe1[k])

                xbt = xb.T.copy()
                np.dot(xbt, dh1, gw1[k])
                for c in range(h1):
                    acc = np.float32(0.0)
                    for r in range(b):
                        acc += dh1[r, c]
                    gb1[k, c] = acc

            c1 = np.float32(1.0) - np.float32(beta1 ** t)
            c2 = np.float32(1.0) - np.float32(beta2 ** t)
            for i in range(theta.shape[0]):
                g = grads[i]
                mbuf[i] = beta1 * mbuf[i] + (np.float32(1.0) - beta1) * g
                vbuf[i] = beta2 * vbuf[i] + (np.float32(1.0) - beta2) * g * g
                theta[i] -= lr * (mbuf[i] / c1) / (np.sqrt(vbuf[i] / c2) + adam_eps)
    return


class _StackedTrainer:
    """Trains K identically shaped perceptrons simultaneously.

    All parameters live in one flat float32 buffer (per-parameter contiguous
    K-stacks) handed to a jitted kernel that runs the entire epoch loop;
    models keep float64 state, the trainer casts on the way in and out.
    Same-level tree nodes share shapes, which is what makes stacking them
    worthwhile.
    """

    def __init__(self, models: list[MlpModel]):
        self.models = models
        k = len(models)
        tmpl = models[0]
        self.dims = (tmpl.input_dim, tmpl.hidden[0], tmpl.hidden[1])
        self.shapes = {name: (k,) + getattr(tmpl, name).shape
                       for name in MlpModel._PARAM_NAMES}
        sizes = [int(np.prod(s)) for s in self.shapes.values()]
        self.theta = np.empty(sum(sizes), dtype=np.float32)
        self.views: dict[str, np.ndarray] = {}
        offset = 0
        for name, size in zip(self.shapes, sizes):
            self.views[name] = self.theta[offset:offset + size].reshape(self.shapes[name])
            offset += size
        for i, model in enumerate(models):
            for name in MlpModel._PARAM_NAMES:
                self.views[name][i] = getattr(model, name)
        self.run_stats = {
            name: np.stack([getattr(m, name) for m in models]).astype(np.float32)
            for name in ("bn1_mean", "bn1_var", "bn2_mean", "bn2_var")}

    def writeback(self) -> None:
        for i, model in enumerate(self.models):
            for name in MlpModel._PARAM_NAMES:
                getattr(model, name)[...] = self.views[name][i]
            for name, stack in self.run_stats.items():
                getattr(model, name)[...] = stack[i]

    def train(self, xs: np.ndarray, ys: np.ndarray, epochs: int,
              seeds: list[int], batch_size: int, lr: float) -> None:
        """Run the full loop on stacked per-model datasets (K, n, dim)."""
        xs = np.ascontiguousarray(xs, dtype=np.float32)
        ys = np.ascontiguousarray(ys, dtype=np.float32)
        k, n, _ = xs.shape
        rngs = [rng_from(seed, "train-shuffle") for seed in seeds]
        perms = np.empty((epochs, k, n), dtype=np.int64)
        for e in range(epochs):
            for i, rng in enumerate(rngs):
                perms[e, i] = rng.permutation(n)
        mbuf = np.zeros_like(self.theta)
        vbuf = np.zeros_like(self.theta)
        totals = np.zeros((epochs, k), dtype=np.float32)
        din, h1, h2 = self.dims
        _train_level_kernel(xs, ys, perms, self.theta, mbuf, vbuf,
                            self.run_stats["bn1_mean"], self.run_stats["bn1_var"],
                            self.run_stats["bn2_mean"], self.run_stats["bn2_var"],
                            din, h1, h2, batch_size, np.float32(lr),
                            np.float32(_BN_EPS), np.float32(_BN_MOMENTUM),
                            np.float32(_ADAM_BETAS[0]), np.float32(_ADAM_BETAS[1]),
                            np.float32(_ADAM_EPS), totals)
        if not np.all(np.isfinite(totals)):
            raise FloatingPointError("training loss became non-finite")
        self.writeback()
        for i, model in enumerate(self.models):
            model.loss_curve_ = [float(totals[e, i] / n) for e in range(epochs)]


def train_node(model: MlpModel, data: Dataset, level: int, seed: int = 0,
               batch_size: int = 32, lr: float = 1e-3) -> MlpModel:
    """Train one node model in place for ``ceil(15 * sqrt(level))`` epochs.

    Binary cross-entropy with Adam; per-epoch mean losses land in
    ``model.loss_curve_``. Batch-norm running statistics stop moving when the
    call returns, so subsequent ``forward`` calls are frozen in eval mode.
    """
    if data.labels is None:
        raise ValueError("training data must carry labels")
    x = data.features
    y = data.labels.astype(float)
    if x.shape[1] != model.input_dim:
        raise ValueError(f"data dim {x.shape[1]} != model input dim {model.input_dim}")
    trainer = _StackedTrainer([model])
    trainer.train(x[None], y[None], epochs_for_level(level), [seed], batch_size, lr)
    return model


# ---------------------------------------------------------------------------
# tree chains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeSpec:
    """Shape of an inverted m-ary ancestor tree: the sink sits at level 1 and
    every node at level < depth has ``degree`` parents one level up."""

    degree: int
    depth: int
    feat_dim: int
    seed: int

    def __post_init__(self) -> None:
        if self.degree < 1 or self.depth < 1 or self.feat_dim < 1:
            raise ValueError("degree, depth and feat_dim must all be >= 1")


def build_tree_chain(spec: TreeSpec) -> tuple[SupplyChainGraph, dict[int, MlpModel]]:
    """Create the tree graph and an untrained perceptron per node.

    A node at level L has first hidden width 16*L and second 32*L; its input
    is the raw feature vector plus one scalar per parent (leaves see only the
    features). Parents concatenate in ascending node-id order.
    """
    nodes: list[NodeRecord] = []
    edges: list[tuple[int, int]] = []
    models: dict[int, MlpModel] = {}
    next_id = 0
    frontier: list[int] = []

    def add_node(level: int) -> int:
        nonlocal next_id
        vid = next_id
        next_id += 1
        nodes.append(NodeRecord(id=vid, owner=f"org{vid}", level=level))
        n_parents = 0 if level == spec.depth else spec.degree
        models[vid] = MlpModel(
            input_dim=spec.feat_dim + n_parents,
            hidden1=16 * level,
            hidden2=32 * level,
            seed=mix_seed(spec.seed, "init", vid),
        )
        return vid

    frontier.append(add_node(1))
    for level in range(2, spec.depth + 1):
        new_frontier = []
        for child in frontier:
            for _ in range(spec.degree):
                parent = add_node(level)
                edges.append((parent, child))
                new_frontier.append(parent)
        frontier = new_frontier
    return SupplyChainGraph(nodes, edges), models


def composed_evaluator(graph: SupplyChainGraph, models,
                       v: int) -> Callable[[np.ndarray], np.ndarray]:
    """Batch evaluator ``(n, feat_dim) -> (n,)`` for the composite function at
    node ``v``: every node receives the query features concatenated with its
    parents' scalar outputs, evaluated once in topological order.

    ``models`` maps node ids to batch callables ``(n, dim) -> (n,)``
    (:class:`MlpModel` instances qualify)."""
    closure = graph.ancestors(v) | {v}
    sub_nodes = [graph.node(i) for i in sorted(closure)]
    sub_edges = [e for e in graph.edges if e[0] in closure and e[1] in closure]
    order = SupplyChainGraph(sub_nodes, sub_edges).topological_order()
    parent_lists = {u: sorted(graph.parents(u)) for u in order}

    def evaluate(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        outs: dict[int, np.ndarray] = {}
        for u in order:
            pars = parent_lists[u]
            feats = x if not pars else np.column_stack([x] + [outs[p] for p in pars])
            outs[u] = np.asarray(models[u](feats), dtype=float)
        return outs[v]

    return evaluate


def forward_composed(graph: SupplyChainGraph, models, v: int, x: np.ndarray) -> float:
    """Composite output of node ``v`` at a single query point."""
    return float(composed_evaluator(graph, models, v)(np.asarray(x, dtype=float))[0])


def train_tree_models(graph: SupplyChainGraph, models: dict[int, MlpModel],
                      spec: TreeSpec) -> None:
    """Train every node of a tree chain, upper levels first.

    Each node draws its own feature sample of ``ceil(1000 * sqrt(level))``
    rows, labels them with its own random quadratic task, and appends its
    parents' composite outputs as extra input columns. Nodes of one level
    share shapes and no dependencies, so each level trains as one stacked
    batch.
    """
    by_level: dict[int, list[int]] = {}
    for rec in graph.nodes:
        by_level.setdefault(rec.level, []).append(rec.id)
    task_seed = mix_seed(spec.seed, "task")  # one labeling task for the whole chain
    for level in sorted(by_level, reverse=True):
        ids = sorted(by_level[level])
        n = samples_for_level(level)
        xs, ys = [], []
        for v in ids:
            feats = generate_features(n, spec.feat_dim,
                                      mix_seed(spec.seed, "data", v)).features
            labels = generate_labels(feats, task_seed)
            pars = sorted(graph.parents(v))
            x = feats
            if pars:
                cols = [composed_evaluator(graph, models, p)(feats) for p in pars]
                x = np.column_stack([feats] + cols)
            xs.append(x)
            ys.append(labels.astype(float))
        trainer = _StackedTrainer([models[v] for v in ids])
        trainer.train(np.stack(xs), np.stack(ys), epochs_for_level(level),
                      [mix_seed(spec.seed, "train", v) for v in ids],
                      batch_size=32, lr=1e-3)


# ---------------------------------------------------------------------------
# basis-function linear models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TanhBasis:
    """Frozen nonlinear feature map: tanh of random affine projections."""

    weights: np.ndarray  # (rho, n_basis)
    offsets: np.ndarray  # (n_basis,)

    @classmethod
    def random(cls, rho: int, n_basis: int, seed: int, scale: float = 1.0) -> "TanhBasis":
        rng = rng_from(seed, "tanh-basis")
        return cls(weights=rng.normal(0.0, scale, size=(rho, n_basis)),
                   offsets=rng.normal(0.0, scale, size=n_basis))

    @property
    def n_basis(self) -> int:
        return self.weights.shape[1]

    @property
    def rho(self) -> int:
        return self.weights.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.rho:
            raise ValueError(f"expected input dim {self.rho}, got {x.shape[1]}")
        return np.tanh(x @ self.weights + self.offsets)


@dataclass
class BasisModel:
    """Linear head on a frozen basis: f(x) = sum_i basis_i(x) * head_i."""

    basis: Callable[[np.ndarray], np.ndarray]
    head: np.ndarray

    def __post_init__(self) -> None:
        self.head = np.asarray(self.head, dtype=float)
        if self.head.ndim != 1 or self.head.size < 1:
            raise ValueError("head must be a vector with at least one entry")

    def features(self, x: np.ndarray) -> np.ndarray:
        phi = np.asarray(self.basis(x), dtype=float)
        if phi.ndim == 1:
            phi = phi[None, :]
        if phi.shape[1] != self.head.size:
            raise ValueError(
                f"basis produced {phi.shape[1]} features for a head of size {self.head.size}")
        return phi

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.features(x) @ self.head


def eval_basis(model: BasisModel, x: np.ndarray) -> float:
    """Scalar prediction of a basis model at one point."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("x must be a single 1-D point")
    return float(model.predict(x[None, :])[0])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def model_to_dict(model: MlpModel) -> dict:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_dim": model.input_dim,
        "hidden": list(model.hidden),
    }
    for name in MlpModel._STATE_NAMES:
        payload[name] = getattr(model, name).tolist()
    return payload


def model_from_dict(payload: dict) -> MlpModel:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    model = MlpModel(payload["input_dim"], *payload["hidden"])
    for name in MlpModel._STATE_NAMES:
        setattr(model, name, np.array(payload[name], dtype=float))
    return model


def save_model(model: MlpModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


def load_model(path: str | Path) -> MlpModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
