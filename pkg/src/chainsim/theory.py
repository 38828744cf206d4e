"""Numerical verification of the error-compounding and head-norm bounds.

The first family of checks simulates the composition-error recursion on a
linear chain with analytic local maps: every node's true local matrix is a
scaled identity, each estimate is perturbed by a fresh mean-zero noise matrix,
and estimates compose by the parent-only rule (estimate of own map, transposed,
times the incoming composite estimate). Monte-Carlo means of the squared
Frobenius error are compared against the closed-form bound, its tightness
construction, and the eigenvalue-ratio growth floor.

The second family checks the sandwich bound on a fine-tuned linear head: the
conditional-derivative vectors of the basis functions are estimated by central
finite differences of Monte-Carlo conditional expectations (common random
numbers across the two sides), and every inequality in the chain that pins
the head norm between the two constraint levels is asserted probe by probe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import BasisModel
from .rng import rng_from

REL_TOL = 1e-9
ABS_TOL = 1e-12


# ---------------------------------------------------------------------------
# error recursion (linear chain)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TheoremOneInstance:
    """Monte-Carlo setup for the chain error recursion.

    The true per-node map is ``sqrt(c1) * I`` and the true incoming composite
    at every step is ``sqrt(c2/dim) * I``; noise matrices have i.i.d. mean-zero
    entries of variance ``sigma2`` (bounded uniform by default). Only the
    analytic-local-map regime is supported: the sole stochasticity is the
    additive noise, matching the vanishing-radius limit of the bound.
    """

    depth: int
    dim: int
    sigma2: float
    trials: int
    seed: int = 0
    c1: float = 1.0
    c2: float | None = None
    noise: str = "uniform"  # or "gaussian"
    exact_local_maps: bool = True

    def __post_init__(self) -> None:
        if self.depth < 1 or self.dim < 1 or self.trials < 1:
            raise ValueError("depth, dim and trials must be >= 1")
        if self.sigma2 < 0 or self.c1 <= 0 or (self.c2 is not None and self.c2 <= 0):
            raise ValueError("sigma2 must be >= 0 and constants positive")
        if self.noise not in ("uniform", "gaussian"):
            raise ValueError(f"unknown noise family {self.noise!r}")
        if not self.exact_local_maps:
            raise ValueError("only the analytic-local-map regime is supported")

    @property
    def c2_value(self) -> float:
        return float(self.dim if self.c2 is None else self.c2)


def _draw_noise(rng: np.random.Generator, inst: TheoremOneInstance,
                shape: tuple[int, ...]) -> np.ndarray:
    if inst.sigma2 == 0.0:
        return np.zeros(shape)
    if inst.noise == "uniform":
        half = math.sqrt(3.0 * inst.sigma2)
        return rng.uniform(-half, half, size=shape)
    return rng.normal(0.0, math.sqrt(inst.sigma2), size=shape)


def bound_rhs(d: int, c1: float, c2: float, dim_delta: int, sigma2: float,
              upstream_err: float) -> float:
    """Closed-form right-hand side of the compounding bound at depth ``d``.

    ``c3 = c1 + dim_delta * sigma2`` multiplies the upstream error ``d - 1``
    times and ``c4 = c2 * dim_delta * sigma2`` accumulates through the
    geometric tail.
    """
    if d < 1:
        raise ValueError("depth must be >= 1")
    c3 = c1 + dim_delta * sigma2
    c4 = c2 * dim_delta * sigma2
    if d == 1:
        return upstream_err
    tail = float(d - 1) if c3 == 1.0 else (c3 ** (d - 1) - 1.0) / (c3 - 1.0)
    return c3 ** (d - 1) * upstream_err + c4 * tail


@dataclass
class DepthErrorRow:
    depth: int
    mean_sq_error: float
    std_error: float
    bound: float
    holds: bool


@dataclass
class ErrorRecursionReport:
    instance: TheoremOneInstance
    upstream_err: float
    rows: list[DepthErrorRow]

    @property
    def all_hold(self) -> bool:
        return all(r.holds for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "depth": self.instance.depth,
            "dim": self.instance.dim,
            "sigma2": self.instance.sigma2,
            "trials": self.instance.trials,
            "c1": self.instance.c1,
            "c2": self.instance.c2_value,
            "upstream_err": self.upstream_err,
            "all_hold": self.all_hold,
            "rows": [vars(r) for r in self.rows],
        }


def _error_chain(inst: TheoremOneInstance, z0: np.ndarray | None = None
                 ) -> tuple[list[float], list[float]]:
    """Squared-error means and standard errors for chain lengths 1..depth.

    ``z0`` overrides the initial error matrix (shared across trials); by
    default the most upstream node contributes one fresh noise application to
    the true incoming composite.
    """
    rng = rng_from(inst.seed, "error-chain")
    dim = inst.dim
    ef_scale = math.sqrt(inst.c2_value / dim)
    root_c1 = math.sqrt(inst.c1)
    means: list[float] = []
    ses: list[float] = []
    if z0 is None:
        delta = _draw_noise(rng, inst, (inst.trials, dim, dim))
        z = ef_scale * np.swapaxes(delta, 1, 2)
    else:
        z = np.broadcast_to(z0, (inst.trials, dim, dim)).copy()
    for step in range(inst.depth):
        if step > 0:
            delta = _draw_noise(rng, inst, (inst.trials, dim, dim))
            delta_t = np.swapaxes(delta, 1, 2)
            z = root_c1 * z + ef_scale * delta_t + delta_t @ z
        sq = np.sum(z * z, axis=(1, 2))
        means.append(float(sq.mean()))
        ses.append(float(sq.std(ddof=1) / math.sqrt(inst.trials)) if inst.trials > 1 else 0.0)
    return means, ses


def simulate_error_recursion(inst: TheoremOneInstance) -> ErrorRecursionReport:
    """Monte-Carlo mean squared composition error at every chain length,
    checked against :func:`bound_rhs` within three standard errors."""
    means, ses = _error_chain(inst)
    upstream = inst.dim * inst.sigma2 * inst.c2_value
    rows = []
    for k, (mean, se) in enumerate(zip(means, ses), start=1):
        bnd = bound_rhs(k, inst.c1, inst.c2_value, inst.dim, inst.sigma2, upstream)
        rows.append(DepthErrorRow(depth=k, mean_sq_error=mean, std_error=se,
                                  bound=bnd, holds=mean <= bnd + 3.0 * se + ABS_TOL))
    return ErrorRecursionReport(instance=inst, upstream_err=upstream, rows=rows)


@dataclass
class TightnessReport:
    instance: TheoremOneInstance
    upstream_err: float
    mean_sq_error: float
    std_error: float
    bound: float
    ratio: float
    holds: bool

    def to_dict(self) -> dict:
        d = vars(self).copy()
        d["instance"] = {
            "depth": self.instance.depth, "dim": self.instance.dim,
            "sigma2": self.instance.sigma2, "trials": self.instance.trials,
            "c1": self.instance.c1, "c2": self.instance.c2_value,
        }
        return d


def tightness_check(d: int, c1: float, c2: float, dim: int, sigma2: float,
                    trials: int, seed: int = 0,
                    upstream_err: float | None = None) -> TightnessReport:
    """Run the equality construction (all scaled identities) and report the
    empirical-to-bound ratio, which should sit at 1 up to Monte-Carlo noise.

    With ``sigma2 == 0`` a deterministic initial error of norm
    ``upstream_err`` (default 1) seeds the chain and the ratio is exactly 1.
    """
    inst = TheoremOneInstance(depth=d, dim=dim, sigma2=sigma2, trials=trials,
                              seed=seed, c1=c1, c2=c2)
    if sigma2 == 0.0:
        upstream = 1.0 if upstream_err is None else upstream_err
        z0 = math.sqrt(upstream / dim) * np.eye(dim)
        means, ses = _error_chain(inst, z0=z0)
    else:
        upstream = dim * sigma2 * inst.c2_value
        means, ses = _error_chain(inst)
    bnd = bound_rhs(d, c1, inst.c2_value, dim, sigma2, upstream)
    mean, se = means[-1], ses[-1]
    ratio = mean / bnd if bnd > 0 else float("nan")
    holds = bnd >= 0 and mean <= bnd + 3.0 * se + ABS_TOL and (
        bnd == 0.0 or ratio >= 0.9)
    return TightnessReport(instance=inst, upstream_err=upstream, mean_sq_error=mean,
                           std_error=se, bound=bnd, ratio=ratio, holds=holds)


# ---------------------------------------------------------------------------
# eigenvalue-ratio growth
# ---------------------------------------------------------------------------


@dataclass
class EigenGrowthRow:
    depth: int
    max_pair_mean: float
    floor: float
    std_error: float
    holds: bool


@dataclass
class EigenGrowthReport:
    v_estimate: float
    rows: list[EigenGrowthRow]

    @property
    def all_hold(self) -> bool:
        return all(r.holds for r in self.rows)

    def to_dict(self) -> dict:
        return {"v_estimate": self.v_estimate, "all_hold": self.all_hold,
                "rows": [vars(r) for r in self.rows]}


def eigen_ratio_growth(depths: Sequence[int], dim: int, trials: int, seed: int = 0,
                       noise_low: float = -0.5, noise_high: float = 0.5,
                       v_samples: int = 400_000) -> EigenGrowthReport:
    """Growth of squared log eigenvalue ratios of products of ``I + Delta``
    with diagonal noise, against the linear-in-depth variance floor.

    For each depth the report keeps the largest pair-wise mean of
    ``log(lambda_k / lambda_l)^2`` and checks it stays above ``depth * V``
    (minus three standard errors), with ``V`` the Monte-Carlo variance of the
    log ratio of two independent ``1 + noise`` draws.
    """
    if noise_low > noise_high:
        raise ValueError("noise_low must be <= noise_high")
    if noise_low <= -1.0:
        raise ValueError("noise support must stay strictly above -1")
    if dim < 2:
        raise ValueError("need at least two eigenvalues to form a ratio")
    depths = sorted(set(int(d) for d in depths))
    if not depths or depths[0] < 1:
        raise ValueError("depths must be positive")

    rng = rng_from(seed, "eigen-growth")
    if noise_low == noise_high:
        v_est = 0.0
    else:
        t = rng.uniform(noise_low, noise_high, size=v_samples)
        t2 = rng.uniform(noise_low, noise_high, size=v_samples)
        v_est = float(np.var(np.log1p(t) - np.log1p(t2)))
    d_max = depths[-1]
    if noise_low == noise_high:
        logs = np.full((trials, d_max, dim), math.log1p(noise_low))
    else:
        logs = np.log1p(rng.uniform(noise_low, noise_high, size=(trials, d_max, dim)))
    cums = np.cumsum(logs, axis=1)
    rows = []
    for d in depths:
        s = cums[:, d - 1, :]  # (trials, dim) log eigenvalues
        diff = s[:, :, None] - s[:, None, :]
        sq = diff ** 2
        pair_means = sq.mean(axis=0)
        np.fill_diagonal(pair_means, -np.inf)
        k, l = np.unravel_index(np.argmax(pair_means), pair_means.shape)
        best = sq[:, k, l]
        se = float(best.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
        floor = d * v_est
        rows.append(EigenGrowthRow(depth=d, max_pair_mean=float(best.mean()),
                                   floor=floor, std_error=se,
                                   holds=bool(best.mean() >= floor - 3.0 * se - ABS_TOL)))
    return EigenGrowthReport(v_estimate=v_est, rows=rows)


# ---------------------------------------------------------------------------
# conditional derivatives and the head-norm sandwich
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianConditionalSampler:
    """Generative model with exact conditionals: a finite uniform latent ``z``
    shifts the means of the first two coordinates; the rest are standard
    normal."""

    z_values: tuple[float, ...]
    slope1: float
    slope2: float
    rho: int

    def __post_init__(self) -> None:
        if self.rho < 2:
            raise ValueError("sampler needs at least two coordinates")
        if not self.z_values:
            raise ValueError("z support must be non-empty")

    def sample_given(self, coord: int, value: float, z: float, m: int,
                     rng: np.random.Generator) -> np.ndarray:
        """Draw the remaining coordinates conditioned on coordinate ``coord``
        fixed at ``value`` and the latent at ``z``."""
        if coord not in (0, 1):
            raise ValueError("only the first two coordinates can be probed")
        x = rng.standard_normal((m, self.rho))
        x[:, 0] += self.slope1 * z
        x[:, 1] += self.slope2 * z
        x[:, coord] = value
        return x


def _difference_quotients(basis, coord: int, x_value: float, z: float,
                          sampler: GaussianConditionalSampler, m: int, h: float,
                          rng: np.random.Generator) -> np.ndarray:
    """Per-sample central difference quotients of every basis function's
    conditional expectation; common random numbers across the two sides."""
    x = sampler.sample_given(coord, x_value, z, m, rng)
    x_plus = x.copy()
    x_plus[:, coord] = x_value + h
    x_minus = x
    x_minus[:, coord] = x_value - h
    return (basis(x_plus) - basis(x_minus)) / (2.0 * h)


@dataclass
class ConditionalDerivative:
    values: np.ndarray  # (n_basis,)
    std_errors: np.ndarray
    samples: int
    step: float
    warning: str | None = None


def conditional_derivative(basis, coord: int, x_value: float, z: float,
                           sampler: GaussianConditionalSampler, m: int,
                           h: float = 1e-2, seed: int = 0,
                           target_se: float | None = None) -> ConditionalDerivative:
    """Finite-difference derivative of each basis function's conditional
    expectation with respect to the probed coordinate."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    if m < 2:
        raise ValueError("need at least two Monte-Carlo samples")
    rng = rng_from(seed, "cond-deriv", coord, repr(float(x_value)), repr(float(z)))
    quot = _difference_quotients(basis, coord, x_value, z, sampler, m, h, rng)
    values = quot.mean(axis=0)
    ses = quot.std(axis=0, ddof=1) / math.sqrt(m)
    warning = None
    if target_se is not None and float(ses.max()) > target_se:
        warning = (f"max std error {ses.max():.3g} exceeds requested "
                   f"{target_se:.3g}; increase the sample count")
    return ConditionalDerivative(values=values, std_errors=ses, samples=m, step=h,
                                 warning=warning)


@dataclass(frozen=True)
class TheoremTwoInstance:
    """One sandwich-bound verification problem: a frozen basis, base and
    fine-tuned heads, the generative sampler, and the probe grids."""

    model: BasisModel
    tuned_head: np.ndarray
    sampler: GaussianConditionalSampler
    x1_grid: tuple[float, ...]
    x2_grid: tuple[float, ...]
    mc_samples: int = 10_000
    fd_step: float = 1e-2
    cos_threshold: float = 1e-6
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tuned_head", np.asarray(self.tuned_head, dtype=float))
        if self.tuned_head.shape != self.model.head.shape:
            raise ValueError("tuned head must match the base head length")
        if self.cos_threshold <= 0:
            raise ValueError("cosine threshold must be positive")
        if self.mc_samples < 2:
            raise ValueError("mc_samples must be >= 2")


def _abs_cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(abs(a @ b) / (na * nb))


@dataclass
class ProbeRow:
    coord: str
    x_value: float
    z: float
    grad_norm: float
    cos_base: float
    cos_tuned: float
    base_constraint: float  # |sum_i head_i * g_i|
    tuned_constraint: float  # |sum_i tuned_i * g_i|
    constraint_se: float
    in_probe_set: bool


@dataclass
class Theorem2Report:
    eps_p: float
    eta_v: float
    lower: float
    upper: float
    r_norm: float
    status: str  # "ok" or "inconclusive"
    holds: bool
    probe_rows: list[ProbeRow]
    inequality_failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "eps_p": self.eps_p,
            "eta_v": self.eta_v,
            "lower": self.lower,
            "upper": self.upper,
            "r_norm": self.r_norm,
            "status": self.status,
            "holds": self.holds,
            "inequality_failures": self.inequality_failures,
            "probes": [vars(p) for p in self.probe_rows],
        }


def _leq(lhs: float, rhs: float, slack: float = 0.0) -> bool:
    return lhs <= rhs + REL_TOL * max(abs(lhs), abs(rhs)) + slack + ABS_TOL


def theorem2_check(inst: TheoremTwoInstance) -> Theorem2Report:
    """Verify the two-sided bound on the fine-tuned head norm.

    Every quantity is estimated on the probe grids; the upstream constraint
    level is the largest base-head derivative magnitude over the first-
    coordinate probes and the downstream level the analogue for the tuned head
    over the second-coordinate probes. All intermediate inequalities are
    asserted at every probe in the qualifying sets, then the final sandwich.
    """
    w = inst.model.head
    r = inst.tuned_head
    r_norm = float(np.linalg.norm(r))
    w_norm = float(np.linalg.norm(w))
    basis = inst.model.features
    tau = inst.cos_threshold

    rows: list[ProbeRow] = []
    failures: list[str] = []

    def probe(coord: int, x_value: float, z: float) -> ProbeRow:
        rng = rng_from(inst.seed, "probe", coord, repr(float(x_value)), repr(float(z)))
        quot = _difference_quotients(basis, coord, x_value, z, inst.sampler,
                                     inst.mc_samples, inst.fd_step, rng)
        g = quot.mean(axis=0)
        base_dots = quot @ w
        tuned_dots = quot @ r
        se = float(base_dots.std(ddof=1) / math.sqrt(inst.mc_samples))
        return ProbeRow(
            coord="x1" if coord == 0 else "x2",
            x_value=float(x_value), z=float(z),
            grad_norm=float(np.linalg.norm(g)),
            cos_base=_abs_cos(w, g), cos_tuned=_abs_cos(r, g),
            base_constraint=float(abs(base_dots.mean())),
            tuned_constraint=float(abs(tuned_dots.mean())),
            constraint_se=se, in_probe_set=False)

    probes1 = [probe(0, xv, z) for z in inst.sampler.z_values for xv in inst.x1_grid]
    probes2 = [probe(1, xv, z) for z in inst.sampler.z_values for xv in inst.x2_grid]
    rows = probes1 + probes2

    eps_p = max(p.base_constraint for p in probes1)
    eps_argmax = max(probes1, key=lambda p: p.base_constraint)
    status = "ok"
    if eps_p <= 3.0 * eps_argmax.constraint_se:
        status = "inconclusive"

    for p in probes1:
        p.in_probe_set = p.cos_base > tau and p.cos_tuned > tau
    for p in probes2:
        p.in_probe_set = p.cos_tuned > tau
    set_s = [p for p in probes1 if p.in_probe_set]
    set_s2 = [p for p in probes2 if p.in_probe_set]

    lower = 0.0
    if set_s and eps_p > 0:
        lower = max(p.tuned_constraint * w_norm * p.cos_base / (eps_p * p.cos_tuned)
                    for p in set_s)
    eta_v = max((p.tuned_constraint for p in probes2), default=0.0)
    upper = float("inf")
    if set_s2:
        upper = min(eta_v / (p.grad_norm * p.cos_tuned) for p in set_s2
                    if p.grad_norm * p.cos_tuned > 0)

    # Intermediate inequalities of the derivation, probe by probe.
    for p in probes1:
        if not _leq(p.base_constraint, eps_p):
            failures.append(f"base constraint exceeds its maximum at {p}")
    if eps_p > 0:
        for p in set_s:
            if not _leq(p.grad_norm, eps_p / (w_norm * p.cos_base)):
                failures.append(f"gradient-norm bound fails at ({p.x_value}, {p.z})")
            if not _leq(p.tuned_constraint,
                        eps_p * r_norm * p.cos_tuned / (w_norm * p.cos_base)):
                failures.append(f"tuned-constraint bound fails at ({p.x_value}, {p.z})")
            if not _leq(p.tuned_constraint * w_norm * p.cos_base / (eps_p * p.cos_tuned),
                        r_norm):
                failures.append(f"lower-bound term exceeds head norm at ({p.x_value}, {p.z})")
    for p in probes2:
        if not _leq(p.tuned_constraint, eta_v):
            failures.append(f"downstream constraint exceeds its maximum at {p}")
    for p in set_s2:
        if p.grad_norm * p.cos_tuned > 0 and not _leq(
                r_norm, eta_v / (p.grad_norm * p.cos_tuned)):
            failures.append(f"upper-bound term below head norm at ({p.x_value}, {p.z})")
    if not _leq(lower, r_norm):
        failures.append("final sandwich fails on the lower side")
    if upper != float("inf") and not _leq(r_norm, upper):
        failures.append("final sandwich fails on the upper side")

    holds = status == "ok" and not failures
    return Theorem2Report(eps_p=eps_p, eta_v=eta_v, lower=lower, upper=upper,
                          r_norm=r_norm, status=status, holds=holds,
                          probe_rows=rows, inequality_failures=failures)


def make_random_theorem2_instance(seed: int, n_basis: int = 16, k_z: int = 3,
                                  rho: int = 6, mc_samples: int = 10_000,
                                  fd_step: float = 1e-2) -> TheoremTwoInstance:
    """Randomized instance used by the verification sweep: random tanh basis,
    Gaussian heads, and evenly spread latent values and probe grids."""
    from .models import TanhBasis

    rng = rng_from(seed, "theorem2-instance")
    basis = TanhBasis.random(rho, n_basis, seed=int(rng.integers(0, 2 ** 62)), scale=0.8)
    w = rng.normal(0.0, 1.0, size=n_basis) / math.sqrt(n_basis)
    r = rng.normal(0.0, 1.0, size=n_basis) / math.sqrt(n_basis)
    sampler = GaussianConditionalSampler(
        z_values=tuple(np.linspace(-1.0, 1.0, k_z)),
        slope1=float(rng.uniform(0.5, 1.5)),
        slope2=float(rng.uniform(0.5, 1.5)),
        rho=rho)
    grid = tuple(np.linspace(-1.5, 1.5, 5))
    return TheoremTwoInstance(model=BasisModel(basis=basis, head=w), tuned_head=r,
                              sampler=sampler, x1_grid=grid, x2_grid=grid,
                              mc_samples=mc_samples, fd_step=fd_step,
                              seed=int(rng.integers(0, 2 ** 62)))
