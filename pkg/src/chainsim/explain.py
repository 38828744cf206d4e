"""Local-linear explanations of node models and their chain-rule composition.

An explanation is the matrix ``W`` that best maps small input displacements to
output displacements around an anchor point, fitted by least squares on
perturbations drawn uniformly from a ball of the configured radius. ``W`` is
expressed per unit displacement (Jacobian-transpose convention, shape
``input_dim x output_dim``), so for a differentiable function it converges to
the transposed Jacobian as the radius shrinks.

Two ways to explain a composed chain:

* the end-to-end explanation fits the whole composite as one black box;
* the supply-chain explanation fits each node against its own model only and
  combines the pieces with the block-form chain rule: every fitted node matrix
  splits into a block for the raw query features and one block per parent, and
  composition walks the graph in topological order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .graph import SupplyChainGraph
from .models import composed_evaluator
from .rng import rng_from

RIDGE_JITTER = 1e-10
COND_LIMIT = 1e12
RECOURSE_T0 = 1e-3
RECOURSE_TOL = 1e-6

BatchFn = Callable[[np.ndarray], np.ndarray]


class ZeroExplanationError(ValueError):
    """A metric needed a direction but the explanation matrix is all zeros."""


@dataclass
class LimeConfig:
    """Sampling configuration for one local fit. ``n_samples`` should be at
    least the input dimension plus one for a well-posed least squares."""

    radius: float = 0.2
    n_samples: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass
class Explanation:
    """Fitted local-linear surrogate with its anchor and fit metadata."""

    weights: np.ndarray  # (input_dim, output_dim)
    anchor: np.ndarray
    radius: float
    sample_count: int
    ill_conditioned: bool = False

    def __post_init__(self) -> None:
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        self.anchor = np.asarray(self.anchor, dtype=float)
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def vector(self) -> np.ndarray:
        """Flattened weights; handy for scalar-output explanations."""
        return self.weights.ravel()


def ball_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """Uniform draws from the unit ball: normalized Gaussian directions scaled
    by U^(1/dim) radii."""
    g = rng.standard_normal((n, dim))
    g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
    radii = rng.uniform(0.0, 1.0, size=n) ** (1.0 / dim)
    return g * radii[:, None]


def _as_output_matrix(y: np.ndarray, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != n:
        raise ValueError(f"function returned {y.shape[0]} rows for {n} inputs")
    return y


def solve_direction_lstsq(u: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least-squares coefficients of ``y`` on direction rows ``u`` with a tiny
    ridge term; also reports whether the design was ill conditioned.

    Directions live in the unit ball, so a healthy Gram matrix has smallest
    eigenvalue well above the ridge floor; sitting at the floor (or a huge
    spread) means the ridge, not the data, decided some directions.
    """
    gram = u.T @ u + RIDGE_JITTER * np.eye(u.shape[1])
    coef = np.linalg.solve(gram, u.T @ y)
    evals = np.linalg.eigvalsh(gram)
    ill = bool(evals[0] <= 100.0 * RIDGE_JITTER or evals[0] <= evals[-1] / COND_LIMIT)
    return coef, ill


def fit_local_linear(fn: BatchFn, anchor: np.ndarray, cfg: LimeConfig,
                     stream: Sequence[int | str] = ()) -> Explanation:
    """Fit the local-linear surrogate of ``fn`` around ``anchor``.

    ``fn`` maps a batch ``(n, dim)`` to outputs ``(n,)`` or ``(n, out_dim)``;
    its value at the anchor is evaluated once and cached. ``stream`` extends
    the RNG label path so several fits can share one config seed.
    """
    anchor = np.asarray(anchor, dtype=float).ravel()
    dim = anchor.size
    rng = rng_from(cfg.seed, "lime-fit", *stream)
    u = ball_directions(rng, cfg.n_samples, dim)
    f0 = _as_output_matrix(fn(anchor[None, :]), 1)
    y = _as_output_matrix(fn(anchor[None, :] + cfg.radius * u), cfg.n_samples) - f0
    coef, ill = solve_direction_lstsq(u, y)
    return Explanation(weights=coef / cfg.radius, anchor=anchor,
                       radius=cfg.radius, sample_count=cfg.n_samples,
                       ill_conditioned=ill)


# ---------------------------------------------------------------------------
# chain explanations
# ---------------------------------------------------------------------------


def end_to_end_explanation(graph: SupplyChainGraph, models: Mapping[int, BatchFn],
                           v: int, x: np.ndarray, cfg: LimeConfig) -> Explanation:
    """Fit the entire composite function at node ``v`` as one black box."""
    return fit_local_linear(composed_evaluator(graph, models, v), x, cfg)


def supply_chain_explanation(graph: SupplyChainGraph, models: Mapping[int, BatchFn],
                             v: int, x: np.ndarray, cfg: LimeConfig,
                             include_direct: bool = True) -> Explanation:
    """Compose per-node local fits into an explanation of the composite.

    Each node is fitted only against its own model at its realized input for
    the query point. With ``include_direct`` (default) composition uses the
    full block-form chain rule, adding every node's direct feature block to
    the parent contributions; without it, nodes that have parents propagate
    parent blocks only.
    """
    x = np.asarray(x, dtype=float).ravel()
    closure = graph.ancestors(v) | {v}
    if len(closure) == 1:
        return fit_local_linear(models[v], x, cfg)
    sub = SupplyChainGraph([graph.node(i) for i in sorted(closure)],
                           [e for e in graph.edges if e[0] in closure and e[1] in closure])
    order = sub.topological_order()
    rho = x.size

    outs: dict[int, float] = {}
    composed: dict[int, np.ndarray] = {}
    ill = False
    for u in order:
        pars = sorted(sub.parents(u))
        anchor = x if not pars else np.concatenate([x, [outs[p] for p in pars]])
        fitted = fit_local_linear(models[u], anchor, cfg, stream=("node", u))
        if fitted.weights.shape != (anchor.size, 1):
            raise RuntimeError(
                f"node {u} produced weight block {fitted.weights.shape}, "
                f"expected ({anchor.size}, 1)")
        ill = ill or fitted.ill_conditioned
        outs[u] = float(models[u](anchor[None, :])[0])
        if not pars:
            composed[u] = fitted.weights
            continue
        e = fitted.weights[:rho].copy() if include_direct else np.zeros((rho, 1))
        for k, p in enumerate(pars):
            e += composed[p] @ fitted.weights[rho + k:rho + k + 1]
        composed[u] = e
    return Explanation(weights=composed[v], anchor=x, radius=cfg.radius,
                       sample_count=cfg.n_samples, ill_conditioned=ill)


# ---------------------------------------------------------------------------
# fidelity metrics
# ---------------------------------------------------------------------------


def cosine_similarity(a: Explanation, b: Explanation) -> float:
    """Cosine of the flattened weight matrices; scale invariant."""
    va, vb = a.vector, b.vector
    if va.shape != vb.shape:
        raise ValueError(f"shape mismatch: {a.weights.shape} vs {b.weights.shape}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ZeroExplanationError("cosine similarity undefined for a zero matrix")
    return float(va @ vb / (na * nb))


def explanation_mse(supply: Explanation, end: Explanation) -> float:
    """Mean squared entry-wise difference (supply minus end-to-end)."""
    if supply.weights.shape != end.weights.shape:
        raise ValueError(
            f"shape mismatch: {supply.weights.shape} vs {end.weights.shape}")
    return float(np.mean((supply.weights - end.weights) ** 2))


def recourse_distance(predict: BatchFn, x: np.ndarray, explanation: Explanation,
                      cap: float = 1000.0) -> float:
    """Distance along the explanation's direction until the 0.5 decision flips.

    Walks a geometric grid to bracket the flip, then bisects to 1e-6; returns
    ``cap`` when no flip occurs within it. The sign of the direction is chosen
    so the first-order predicted change crosses the threshold.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    x = np.asarray(x, dtype=float).ravel()
    if explanation.weights.shape[1] != 1:
        raise ValueError("recourse needs a scalar-output explanation")
    w = explanation.vector
    norm = np.linalg.norm(w)
    if norm == 0.0:
        raise ZeroExplanationError("recourse direction undefined for zero weights")
    p0 = float(np.asarray(predict(x[None, :])).ravel()[0])
    positive = p0 >= 0.5
    direction = (-w if positive else w) / norm

    def flipped(p: np.ndarray) -> np.ndarray:
        return (p < 0.5) if positive else (p >= 0.5)

    ts = _geometric_grid(cap)
    probes = np.asarray(predict(x[None, :] + ts[:, None] * direction)).ravel()
    hits = np.flatnonzero(flipped(probes))
    if hits.size == 0:
        return cap
    k = int(hits[0])
    lo = 0.0 if k == 0 else float(ts[k - 1])
    hi = float(ts[k])
    while hi - lo > RECOURSE_TOL:
        mid = 0.5 * (lo + hi)
        pm = float(np.asarray(predict(x[None, :] + mid * direction)).ravel()[0])
        if flipped(np.array([pm]))[0]:
            hi = mid
        else:
            lo = mid
    return hi


def recourse_error(supply_dist: float, end_dist: float) -> float:
    """Supply-chain recourse distance minus end-to-end recourse distance."""
    return float(supply_dist) - float(end_dist)


def _geometric_grid(cap: float, t0: float = RECOURSE_T0) -> np.ndarray:
    ts = [min(t0, cap)]
    while ts[-1] < cap:
        ts.append(min(ts[-1] * 2.0, cap))
    return np.array(ts)


def recourse_distances_batch(predict: BatchFn, xs: np.ndarray, ws: np.ndarray,
                             cap: float = 1000.0) -> np.ndarray:
    """Vectorized :func:`recourse_distance` over rows of anchors/directions."""
    xs = np.asarray(xs, dtype=float)
    ws = np.asarray(ws, dtype=float)
    norms = np.linalg.norm(ws, axis=1)
    if np.any(norms == 0.0):
        raise ZeroExplanationError("recourse direction undefined for zero weights")
    p0 = np.asarray(predict(xs)).ravel()
    positive = p0 >= 0.5
    dirs = np.where(positive[:, None], -ws, ws) / norms[:, None]

    ts = _geometric_grid(cap)
    n = xs.shape[0]
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    prev = np.zeros(n)
    found = np.zeros(n, dtype=bool)
    for t in ts:
        active = ~found
        if not active.any():
            break
        p = np.asarray(predict(xs[active] + t * dirs[active])).ravel()
        flip = np.where(positive[active], p < 0.5, p >= 0.5)
        rows = np.flatnonzero(active)
        hit = rows[flip]
        lo[hit] = prev[hit]
        hi[hit] = t
        found[hit] = True
        prev[rows[~flip]] = t
    out = np.full(n, cap)
    active = found.copy()
    while active.any():
        mids = 0.5 * (lo[active] + hi[active])
        p = np.asarray(predict(xs[active] + mids[:, None] * dirs[active])).ravel()
        flip = np.where(positive[active], p < 0.5, p >= 0.5)
        rows = np.flatnonzero(active)
        hi[rows[flip]] = mids[flip]
        lo[rows[~flip]] = mids[~flip]
        done = (hi[rows] - lo[rows]) <= RECOURSE_TOL
        active[rows[done]] = False
    out[found] = hi[found]
    return out


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def explanation_to_csv(explanation: Explanation) -> str:
    """Row-major CSV of the weight matrix preceded by a shape header."""
    lines = [f"# shape,{explanation.weights.shape[0]},{explanation.weights.shape[1]}"]
    for row in explanation.weights:
        lines.append(",".join(repr(float(val)) for val in row))
    return "\n".join(lines) + "\n"
