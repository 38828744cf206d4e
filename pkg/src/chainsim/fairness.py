"""Fairness-regularized training, head-only fine-tuning, and trade-off summaries.

Desk-scale stand-in for a base-model-plus-fine-tune pipeline: synthetic group
data (one label-signal direction, one sensitive-signal direction, isotropic
noise), a small embedding-plus-linear-head perceptron trained with a smoothed
fairness penalty, and fine-tuning that re-learns only the head on frozen
embeddings. Pareto frontiers over (fairness gap, accuracy) and achievable-range
reports summarize how upstream regularization restricts downstream models.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .models import AdamState, Dataset, sigmoid
from .rng import rng_from

log = logging.getLogger(__name__)


class FairnessKind(str, Enum):
    DEMOGRAPHIC_PARITY = "demographic_parity"
    EQUALIZED_FPR = "equalized_fpr"
    EQUALIZED_ODDS = "equalized_odds"
    NONE = "none"


class DegenerateCellError(ValueError):
    """A group/label cell needed by a fairness quantity is empty."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class GroupSplits:
    """Four disjoint, exhaustive splits of one synthetic group dataset."""

    base_train: Dataset
    base_test: Dataset
    ft_train: Dataset
    ft_test: Dataset

    def all_splits(self) -> dict[str, Dataset]:
        return {"base_train": self.base_train, "base_test": self.base_test,
                "ft_train": self.ft_train, "ft_test": self.ft_test}


# (label, sensitive) cell order for the group proportions.
GROUP_CELLS = ((1, 1), (1, 0), (0, 1), (0, 0))
DEFAULT_PROPORTIONS = (0.4, 0.2, 0.2, 0.2)
SPLIT_FRACTIONS = (0.6, 0.1, 0.2, 0.1)


def generate_group_data(n: int, rho: int, proportions: Sequence[float] = DEFAULT_PROPORTIONS,
                        label_signal: float = 2.0, sensitive_signal: float = 2.0,
                        noise_sd: float = 1.0, seed: int = 0) -> GroupSplits:
    """Synthetic binary-label data with a binary sensitive attribute.

    Each row's (label, sensitive) cell is drawn with the given proportions;
    features are the label signal along the first axis plus the sensitive
    signal along the second axis plus isotropic Gaussian noise. Rows are split
    60/10/20/10 into base-train, base-test, fine-tune-train, fine-tune-test.
    """
    if n < 4 or rho < 2:
        raise ValueError("need n >= 4 rows and rho >= 2 features")
    props = np.asarray(proportions, dtype=float)
    if props.shape != (4,) or (props < 0).any() or abs(props.sum() - 1.0) > 1e-9:
        raise ValueError("proportions must be four non-negative values summing to 1")
    rng = rng_from(seed, "group-data")
    cell = rng.choice(4, size=n, p=props)
    labels = np.array([GROUP_CELLS[c][0] for c in range(4)])[cell]
    sens = np.array([GROUP_CELLS[c][1] for c in range(4)])[cell]
    x = noise_sd * rng.standard_normal((n, rho))
    x[:, 0] += (labels - 0.5) * label_signal
    x[:, 1] += (sens - 0.5) * sensitive_signal
    i1 = int(n * SPLIT_FRACTIONS[0])
    i2 = i1 + int(n * SPLIT_FRACTIONS[1])
    i3 = i2 + int(n * SPLIT_FRACTIONS[2])
    parts = []
    for lo, hi in ((0, i1), (i1, i2), (i2, i3), (i3, n)):
        parts.append(Dataset(features=x[lo:hi], labels=labels[lo:hi],
                             sensitive=sens[lo:hi], group=cell[lo:hi]))
    return GroupSplits(*parts)


# ---------------------------------------------------------------------------
# smoothed regularizers
# ---------------------------------------------------------------------------


def _group_mean_grad(scores, mask0, mask1, cell0: str, cell1: str, strict: bool):
    """|mean(scores[mask0]) - mean(scores[mask1])| and its score gradient."""
    n0, n1 = int(mask0.sum()), int(mask1.sum())
    if n0 == 0 or n1 == 0:
        if strict:
            missing = cell0 if n0 == 0 else cell1
            raise DegenerateCellError(f"no rows in cell ({missing})")
        return 0.0, np.zeros_like(scores), True
    diff = scores[mask0].mean() - scores[mask1].mean()
    grad = np.zeros_like(scores)
    sign = math.copysign(1.0, diff) if diff != 0.0 else 0.0
    grad[mask0] = sign / n0
    grad[mask1] = -sign / n1
    return abs(diff), grad, False


def _regularizer_with_grad(kind: FairnessKind, scores: np.ndarray,
                           labels: np.ndarray | None, sensitive: np.ndarray,
                           strict: bool) -> tuple[float, np.ndarray, bool]:
    if kind is FairnessKind.NONE:
        return 0.0, np.zeros_like(scores), False
    s0 = sensitive == 0
    s1 = sensitive == 1
    if kind is FairnessKind.DEMOGRAPHIC_PARITY:
        return _group_mean_grad(scores, s0, s1, "sensitive=0", "sensitive=1", strict)
    if labels is None:
        raise ValueError(f"{kind.value} needs labels")
    neg = labels == 0
    value, grad, degenerate = _group_mean_grad(
        scores, s0 & neg, s1 & neg, "sensitive=0,label=0", "sensitive=1,label=0", strict)
    if kind is FairnessKind.EQUALIZED_FPR:
        return value, grad, degenerate
    pos = labels == 1
    v2, g2, deg2 = _group_mean_grad(
        scores, s0 & pos, s1 & pos, "sensitive=0,label=1", "sensitive=1,label=1", strict)
    return value + v2, grad + g2, degenerate or deg2


def fairness_regularizer(kind: FairnessKind, scores: np.ndarray,
                         labels: np.ndarray | None, sensitive: np.ndarray) -> float:
    """Smoothed fairness penalty on soft scores.

    Demographic parity is the absolute difference of group mean scores;
    equalized FPR restricts it to negative-label rows; equalized odds adds the
    positive-label term. Raises :class:`DegenerateCellError` when a required
    cell is empty.
    """
    scores = np.asarray(scores, dtype=float)
    sensitive = np.asarray(sensitive)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != scores.shape:
            raise ValueError("labels and scores must align")
    if sensitive.shape != scores.shape:
        raise ValueError("sensitive and scores must align")
    value, _, _ = _regularizer_with_grad(FairnessKind(kind), scores, labels,
                                         sensitive, strict=True)
    return value


# ---------------------------------------------------------------------------
# embedding + head model
# ---------------------------------------------------------------------------


class FairMlp:
    """Two-hidden-layer perceptron split into a frozen-able embedding and a
    linear sigmoid head."""

    def __init__(self, input_dim: int, widths: tuple[int, int] = (32, 32), seed: int = 0):
        rng = rng_from(seed, "fair-mlp-init")
        self.input_dim = input_dim
        self.widths = tuple(widths)
        self.w1 = rng.uniform(-1, 1, (input_dim, widths[0])) / math.sqrt(input_dim)
        self.b1 = np.zeros(widths[0])
        self.w2 = rng.uniform(-1, 1, (widths[0], widths[1])) / math.sqrt(widths[0])
        self.b2 = np.zeros(widths[1])
        self.w3 = rng.uniform(-1, 1, (widths[1], 1)) / math.sqrt(widths[1])
        self.b3 = np.zeros(1)
        self.loss_curve_: list[float] = []
        self.degenerate_batches_ = 0

    @classmethod
    def from_parts(cls, w1, b1, w2, b2, w3, b3) -> "FairMlp":
        model = cls.__new__(cls)
        model.input_dim = w1.shape[0]
        model.widths = (w1.shape[1], w2.shape[1])
        model.w1, model.b1, model.w2, model.b2 = w1, b1, w2, b2
        model.w3, model.b3 = w3, b3
        model.loss_curve_ = []
        model.degenerate_batches_ = 0
        return model

    def embed(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        h = np.maximum(x @ self.w1 + self.b1, 0.0)
        return np.maximum(h @ self.w2 + self.b2, 0.0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return sigmoid((self.embed(x) @ self.w3 + self.b3)[:, 0])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def freeze_embedding(self) -> None:
        for arr in (self.w1, self.b1, self.w2, self.b2):
            arr.flags.writeable = False

    def embedding_bytes(self) -> bytes:
        return b"".join(arr.tobytes() for arr in (self.w1, self.b1, self.w2, self.b2))


@dataclass(frozen=True)
class FairTrainConfig:
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    widths: tuple[int, int] = (32, 32)


def train_base_fair(data: Dataset, alpha_p: float, kind: FairnessKind,
                    seed: int = 0, cfg: FairTrainConfig = FairTrainConfig()) -> FairMlp:
    """Train a base model on cross-entropy plus ``alpha_p`` times the fairness
    penalty; the returned model's embedding arrays are frozen read-only.

    Mini-batches missing a required group cell contribute zero penalty for
    that batch (counted on ``model.degenerate_batches_``).
    """
    if data.labels is None or data.sensitive is None:
        raise ValueError("base training data needs labels and a sensitive attribute")
    kind = FairnessKind(kind)
    x = data.features
    y = data.labels.astype(float)
    sens = np.asarray(data.sensitive)
    model = FairMlp(x.shape[1], widths=cfg.widths, seed=seed)
    params = [model.w1, model.b1, model.w2, model.b2, model.w3, model.b3]
    adam = AdamState(params, lr=cfg.lr)
    rng = rng_from(seed, "fair-base-shuffle")
    n = x.shape[0]
    apply_reg = alpha_p != 0.0 and kind is not FairnessKind.NONE
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb, sb = x[idx], y[idx], sens[idx]
            z1 = xb @ model.w1 + model.b1
            h1 = np.maximum(z1, 0.0)
            z2 = h1 @ model.w2 + model.b2
            h2 = np.maximum(z2, 0.0)
            p = sigmoid((h2 @ model.w3 + model.b3)[:, 0])
            m = idx.size
            loss = -np.mean(yb * np.log(p) + (1.0 - yb) * np.log(1.0 - p))
            dlogit = (p - yb) / m
            if apply_reg:
                reg, reg_grad, degenerate = _regularizer_with_grad(
                    kind, p, data.labels[idx], sb, strict=False)
                if degenerate:
                    model.degenerate_batches_ += 1
                loss += alpha_p * reg
                dlogit = dlogit + alpha_p * reg_grad * p * (1.0 - p)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss}")
            dlogit = dlogit[:, None]
            dw3 = h2.T @ dlogit
            db3 = dlogit.sum(axis=0)
            dh2 = dlogit @ model.w3.T
            dz2 = np.where(z2 > 0, dh2, 0.0)
            dw2 = h1.T @ dz2
            db2 = dz2.sum(axis=0)
            dh1 = dz2 @ model.w2.T
            dz1 = np.where(z1 > 0, dh1, 0.0)
            dw1 = xb.T @ dz1
            db1 = dz1.sum(axis=0)
            adam.step(params, [dw1, db1, dw2, db2, dw3, db3])
            total += loss * m
        model.loss_curve_.append(total / n)
    if model.degenerate_batches_:
        log.debug("base training skipped the penalty on %d degenerate batches",
                  model.degenerate_batches_)
    model.freeze_embedding()
    return model


def fine_tune_head(base: FairMlp, data: Dataset, alpha_v: float, kind: FairnessKind,
                   seed: int = 0, cfg: FairTrainConfig = FairTrainConfig(),
                   warm_start: bool = False) -> FairMlp:
    """Fine-tune only the final linear layer on frozen base embeddings.

    The head is re-initialized (or copied from the base with ``warm_start``)
    and trained on cross-entropy plus ``alpha_v`` times the fairness penalty;
    the embedding arrays are shared with the base model, untouched.
    """
    if data.labels is None or data.sensitive is None:
        raise ValueError("fine-tune data needs labels and a sensitive attribute")
    kind = FairnessKind(kind)
    emb = base.embed(data.features)
    y = data.labels.astype(float)
    sens = np.asarray(data.sensitive)
    width = emb.shape[1]
    if warm_start:
        w3 = base.w3.copy()
        b3 = base.b3.copy()
    else:
        rng_init = rng_from(seed, "fair-head-init")
        w3 = rng_init.uniform(-1, 1, (width, 1)) / math.sqrt(width)
        b3 = np.zeros(1)
    model = FairMlp.from_parts(base.w1, base.b1, base.w2, base.b2, w3, b3)
    params = [w3, b3]
    adam = AdamState(params, lr=cfg.lr)
    rng = rng_from(seed, "fair-head-shuffle")
    n = emb.shape[0]
    apply_reg = alpha_v != 0.0 and kind is not FairnessKind.NONE
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            eb, yb, sb = emb[idx], y[idx], sens[idx]
            p = sigmoid((eb @ w3 + b3)[:, 0])
            m = idx.size
            loss = -np.mean(yb * np.log(p) + (1.0 - yb) * np.log(1.0 - p))
            dlogit = (p - yb) / m
            if apply_reg:
                reg, reg_grad, degenerate = _regularizer_with_grad(
                    kind, p, data.labels[idx], sb, strict=False)
                if degenerate:
                    model.degenerate_batches_ += 1
                loss += alpha_v * reg
                dlogit = dlogit + alpha_v * reg_grad * p * (1.0 - p)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss}")
            dlogit = dlogit[:, None]
            adam.step(params, [eb.T @ dlogit, dlogit.sum(axis=0)])
            total += loss * m
        model.loss_curve_.append(total / n)
    if model.degenerate_batches_:
        log.debug("fine-tuning skipped the penalty on %d degenerate batches",
                  model.degenerate_batches_)
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class ModelOutcome:
    """Held-out metrics of one fine-tuned (or base) model plus sweep context."""

    accuracy: float
    dp_gap: float
    fpr_gap: float
    eo_gap: float
    alpha_p: float = 0.0
    alpha_v: float = 0.0
    upstream_kind: str = FairnessKind.NONE.value
    downstream_kind: str = FairnessKind.NONE.value
    seed: int = 0

    def gap(self, metric: str) -> float:
        return getattr(self, metric)


def _rate(mask_num, mask_den, cell: str) -> float:
    den = int(mask_den.sum())
    if den == 0:
        raise DegenerateCellError(f"no rows in cell ({cell})")
    return float(mask_num.sum() / den)


def evaluate_outcome(model: FairMlp, data: Dataset) -> ModelOutcome:
    """Hard-threshold (0.5) accuracy and the three fairness gaps.

    The equalized-odds gap is the larger of the FPR and TPR gaps, keeping it
    in [0, 1] like the other two.
    """
    if data.labels is None or data.sensitive is None:
        raise ValueError("evaluation data needs labels and a sensitive attribute")
    pred = model.forward(data.features) >= 0.5
    y = np.asarray(data.labels).astype(bool)
    s = np.asarray(data.sensitive)
    acc = float((pred == y).mean())
    rates = {}
    for g in (0, 1):
        gm = s == g
        rates[f"pos{g}"] = _rate(pred & gm, gm, f"sensitive={g}")
        rates[f"fpr{g}"] = _rate(pred & ~y & gm, ~y & gm, f"sensitive={g},label=0")
        rates[f"tpr{g}"] = _rate(pred & y & gm, y & gm, f"sensitive={g},label=1")
    dp = abs(rates["pos0"] - rates["pos1"])
    fpr = abs(rates["fpr0"] - rates["fpr1"])
    tpr = abs(rates["tpr0"] - rates["tpr1"])
    return ModelOutcome(accuracy=acc, dp_gap=dp, fpr_gap=fpr, eo_gap=max(fpr, tpr))


# ---------------------------------------------------------------------------
# frontiers
# ---------------------------------------------------------------------------


def pareto_frontier(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Non-dominated (gap, accuracy) points, sorted by gap ascending.

    A point is dominated when some other point is >= in both coordinates and
    strictly better in one; survivors form a strictly accuracy-decreasing
    staircase over increasing gap (the trade-off curve's outer edge).
    """
    if not points:
        raise ValueError("need at least one point")
    unique = sorted(set((float(g), float(a)) for g, a in points))
    kept = []
    for g, a in unique:
        dominated = any(
            (g2 >= g and a2 >= a) and (g2 > g or a2 > a) for g2, a2 in unique)
        if not dominated:
            kept.append((g, a))
    kept.sort(key=lambda p: (p[0], -p[1]))
    return kept


def frontier_area(frontier: Sequence[tuple[float, float]],
                  gap_range: tuple[float, float]) -> float:
    """Area under the step interpolation of frontier accuracy over a gap
    interval; the first point's accuracy extends left of its gap."""
    if not frontier:
        raise ValueError("frontier must be non-empty")
    lo, hi = float(gap_range[0]), float(gap_range[1])
    if hi < lo:
        raise ValueError("gap range must be ordered")
    pts = sorted((float(g), float(a)) for g, a in frontier)

    def acc_at(g: float) -> float:
        best = pts[0][1]
        for gk, ak in pts:
            if gk <= g:
                best = ak
            else:
                break
        return best

    cuts = [lo] + [g for g, _ in pts if lo < g < hi] + [hi]
    area = 0.0
    for a, b in zip(cuts, cuts[1:]):
        area += (b - a) * acc_at(a)
    return area


# ---------------------------------------------------------------------------
# reversibility
# ---------------------------------------------------------------------------

GAP_METRICS = ("dp_gap", "fpr_gap", "eo_gap")


@dataclass
class ReversibilityReport:
    """Achievable downstream gap ranges per upstream kind, with pairwise
    overlap flags per (base regularization strength, metric)."""

    ranges: list[dict]
    overlap: list[dict]

    @property
    def all_overlap(self) -> bool:
        return all(row["overlap"] for row in self.overlap)

    def to_dict(self) -> dict:
        return {"ranges": self.ranges, "overlap": self.overlap,
                "all_overlap": self.all_overlap}


def reversibility_report(outcomes: Sequence[ModelOutcome]) -> ReversibilityReport:
    """Summarize, for every base strength and gap metric, the [min, max]
    downstream gap reachable under each upstream kind, and whether those
    ranges overlap pairwise across kinds."""
    kinds = sorted({o.upstream_kind for o in outcomes})
    if len(kinds) < 2:
        raise ValueError("need outcomes from at least two upstream kinds")
    alphas = sorted({o.alpha_p for o in outcomes})
    ranges = []
    overlap = []
    for alpha in alphas:
        for metric in GAP_METRICS:
            intervals = {}
            for kind in kinds:
                vals = [o.gap(metric) for o in outcomes
                        if o.alpha_p == alpha and o.upstream_kind == kind]
                if not vals:
                    continue
                intervals[kind] = (min(vals), max(vals))
                ranges.append({"alpha_p": alpha, "metric": metric, "kind": kind,
                               "lo": min(vals), "hi": max(vals)})
            if len(intervals) >= 2:
                los = [v[0] for v in intervals.values()]
                his = [v[1] for v in intervals.values()]
                overlap.append({"alpha_p": alpha, "metric": metric,
                                "overlap": max(los) <= min(his)})
    return ReversibilityReport(ranges=ranges, overlap=overlap)
