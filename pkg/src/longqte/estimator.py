"""Cross-fitted doubly robust estimation of long-term potential-outcome quantiles.

For arm ``t`` write ``a = T_t / e_t(X)`` with ``T_1 = T``, ``T_0 = 1 - T``,
``e_1 = e`` and ``e_0 = 1 - e``.  A unit's contribution to the objective is

    G/nu * [a * Q3(S, X, q) + (1 - a) * Q2(X, q)]
      + T_t (1 - G)/nu * alpha_t(S, X) * [rho(Y - q) - Q3(S, X, q)]

where ``Q3`` is the outcome model's expected check loss at the unit's own
``(S, X)`` and ``Q2`` its transport over surrogate draws.  Every term is a
weighted Gaussian or point-mass atom, so the objective over all units is

    tau * (sum c mu + sum d y - q * (sum c + sum d)) + sum c E(q - Y)^+ + sum d (q - y)^+

and its derivative in ``q`` (the efficient-influence-function moment) is the
same sum with hinges replaced by CDFs.  :class:`MomentContext` flattens the
atoms once per arm; all per-``q`` work is then arithmetic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from . import _kernels
from .data import Dataset, FoldPlan, ValidationError, check_tau, make_folds
from .inference import ConfidenceInterval, confidence_interval, eif_values, estimate_J, variance
from .nuisance import NuisanceBundle, NuisanceConfig, derive_seed, fit_bundle

__all__ = [
    "EstimatorConfig",
    "MomentContext",
    "QteEstimate",
    "NumericalError",
    "objective_value",
    "moment_value",
    "solve_quantile",
    "bundle_seed",
    "fit_fold_bundles",
    "estimate_from_bundles",
    "estimate_qte",
]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class NumericalError(RuntimeError):
    """Non-finite objective or other numerical breakdown (exit status 3)."""


@dataclass(frozen=True)
class EstimatorConfig:
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    seed: int = 0
    grid_points: int = 512
    bracket_pad: float = 0.10
    rel_tol: float = 1e-8
    j_floor: float = 1e-4
    ci_alpha: float = 0.05

    def echo(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "nuisance"}
        out["nuisance"] = dict(self.nuisance.__dict__)
        return out


@dataclass(frozen=True, eq=False)
class ArmAtoms:
    """Flattened atoms for one arm.

    ``k``/``kd`` are per-unit coefficients (no fold weighting); ``c``/``d``
    include the fold weights used by the objective.  ``fb_*`` carry the
    transported outcome components for the density bridge.
    """

    t: int
    c: np.ndarray
    k: np.ndarray
    mu: np.ndarray
    sd: np.ndarray
    unit: np.ndarray
    d: np.ndarray
    kd: np.ndarray
    y: np.ndarray
    unit_d: np.ndarray
    fb_w: np.ndarray
    fb_mu: np.ndarray
    fb_sd: np.ndarray
    fb_unit: np.ndarray

    @property
    def total(self) -> float:
        return float(self.c.sum() + self.d.sum())

    @property
    def first_moment(self) -> float:
        return float(self.c @ self.mu + self.d @ self.y)


def _arm_atoms(dataset: Dataset, plan: FoldPlan, bundles, nu: float, unit_w: np.ndarray, t: int) -> ArmAtoms:
    ks, mus, sds, units = [], [], [], []
    kds, ys, units_d = [], [], []
    fws, fmus, fsds, funits = [], [], [], []
    for j, b in enumerate(bundles):
        fold = plan.fold(j)
        gf, tf = dataset.g[fold], dataset.t[fold]
        arm = (tf == 1) if t == 1 else (tf == 0)

        # experimental units: transported loss for every one, own-(S, X) loss for arm members
        u1 = fold[gf == 1]
        if u1.size:
            x1, s1 = dataset.x[u1], dataset.s[u1]
            e = b.e(x1)
            et = e if t == 1 else 1.0 - e
            a = arm[gf == 1] / et
            draws = b.surrogate_draws(t, x1, u1)
            n1, r, ds = draws.shape
            cond = np.hstack([draws.reshape(n1 * r, ds), np.repeat(x1, r, axis=0)])
            w, mu, sd = b.outcome_models[t].scalar_components(cond)
            mm = w.shape[1]
            wr = w.reshape(n1, r * mm) / r
            ks.append((((1.0 - a) / nu)[:, None] * wr).ravel())
            mus.append(mu.ravel())
            sds.append(sd.ravel())
            units.append(np.repeat(u1, r * mm))
            fws.append(wr.ravel())
            fmus.append(mu.ravel())
            fsds.append(sd.ravel())
            funits.append(np.repeat(u1, r * mm))
            own = a > 0
            if own.any():
                w, mu, sd = b.outcome_models[t].scalar_components(b.outcome_cond(s1[own], x1[own]))
                ks.append(((a[own] / nu)[:, None] * w).ravel())
                mus.append(mu.ravel())
                sds.append(sd.ravel())
                units.append(np.repeat(u1[own], w.shape[1]))

        # observational arm members: weighted residual of the check loss
        u0 = fold[(gf == 0) & arm]
        if u0.size:
            x0, s0 = dataset.x[u0], dataset.s[u0]
            al = b.alpha(t, s0, x0)
            w, mu, sd = b.outcome_models[t].scalar_components(b.outcome_cond(s0, x0))
            ks.append((-(al / nu)[:, None] * w).ravel())
            mus.append(mu.ravel())
            sds.append(sd.ravel())
            units.append(np.repeat(u0, w.shape[1]))
            kds.append(al / nu)
            ys.append(dataset.y[u0])
            units_d.append(u0)

    def cat(parts, dtype=float):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    k = cat(ks)
    unit = cat(units, np.int64)
    kd = cat(kds)
    unit_d = cat(units_d, np.int64)
    return ArmAtoms(
        t=t,
        c=k * unit_w[unit],
        k=k,
        mu=cat(mus),
        sd=cat(sds),
        unit=unit,
        d=kd * unit_w[unit_d],
        kd=kd,
        y=cat(ys),
        unit_d=unit_d,
        fb_w=cat(fws),
        fb_mu=cat(fmus),
        fb_sd=cat(fsds),
        fb_unit=cat(funits, np.int64),
    )


@dataclass(frozen=True, eq=False)
class MomentContext:
    """Cross-fitted evaluation state: each unit's atoms come from its own fold's bundle."""

    dataset: Dataset
    plan: FoldPlan
    bundles: tuple
    nu_hat: float
    unit_weight: np.ndarray
    arms: tuple
    bracket: tuple
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(
        cls,
        dataset: Dataset,
        plan: FoldPlan,
        bundles: Sequence[NuisanceBundle],
        nu: float | None = None,
        bracket_pad: float = 0.10,
    ) -> "MomentContext":
        bundles = tuple(bundles)
        if len(bundles) != plan.k:
            raise ValueError(f"need one bundle per fold ({plan.k}), got {len(bundles)}")
        for j, b in enumerate(bundles):
            if b.training_index is not None and np.intersect1d(b.training_index, plan.fold(j)).size:
                raise ValueError(f"bundle {j} was trained on units of its own fold")
        nu = dataset.nu_hat if nu is None else float(nu)
        if not nu > 0:
            raise ValueError("nu must be positive")
        sizes = plan.sizes()
        unit_w = 1.0 / (plan.k * sizes[plan.assignment])
        arms = tuple(_arm_atoms(dataset, plan, bundles, nu, unit_w, t) for t in (0, 1))
        lo, hi = dataset.outcome_range()
        span = hi - lo if hi > lo else 1.0
        bracket = (lo - bracket_pad * span, hi + bracket_pad * span)
        return cls(dataset, plan, bundles, nu, unit_w, arms, bracket)

    def arm(self, t: int) -> ArmAtoms:
        return self.arms[t]

    def hinge_grid(self, t: int, ng: int):
        key = ("grid", t, ng)
        if key not in self._cache:
            lo, hi = self.bracket
            dq = (hi - lo) / (ng - 1)
            a = self.arms[t]
            self._cache[key] = _kernels.hinge_grid(lo, dq, ng, a.c, a.mu, a.sd, a.d, a.y)
        return self._cache[key]

    def psi_units(self, t: int, q: float, tau: float) -> np.ndarray:
        """Per-unit moment ``psi_t(W_i; q)`` (zero for units not touching arm ``t``)."""
        a = self.arms[t]
        n = self.dataset.n
        cdf = np.bincount(a.unit, weights=a.k * ndtr((q - a.mu) / a.sd), minlength=n)
        ind = np.bincount(a.unit_d, weights=a.kd * (a.y <= q), minlength=n)
        tot = np.bincount(a.unit, weights=a.k, minlength=n) + np.bincount(a.unit_d, weights=a.kd, minlength=n)
        return cdf + ind - tau * tot

    def fbar_units(self, t: int, q: float) -> np.ndarray:
        """Transported density at ``q`` for every experimental unit (in dataset order)."""
        a = self.arms[t]
        z = (q - a.fb_mu) / a.fb_sd
        dens = a.fb_w * np.exp(-0.5 * z * z) / (a.fb_sd * math.sqrt(2.0 * math.pi))
        per_unit = np.bincount(a.fb_unit, weights=dens, minlength=self.dataset.n)
        return per_unit[self.dataset.g == 1]

    def training_audit(self) -> bool:
        """True when no bundle's training rows intersect the fold it evaluates."""
        for j, b in enumerate(self.bundles):
            if b.training_index is None:
                continue
            if np.intersect1d(b.training_index, self.plan.fold(j)).size:
                return False
        return True


def objective_value(ctx: MomentContext, t: int, q: float, tau: float) -> float:
    """Fold-averaged empirical doubly robust check-loss objective at ``q``."""
    a = ctx.arms[t]
    return tau * (a.first_moment - q * a.total) + _kernels.hinge_point(float(q), a.c, a.mu, a.sd, a.d, a.y)


def moment_value(ctx: MomentContext, t: int, q: float, tau: float) -> float:
    """Fold-averaged empirical influence-function moment (derivative of the objective)."""
    a = ctx.arms[t]
    return _kernels.cdf_point(float(q), a.c, a.mu, a.sd, a.d, a.y) - tau * a.total


def solve_quantile(ctx: MomentContext, t: int, tau: float, grid_points: int = 512, rel_tol: float = 1e-8) -> float:
    """Grid scan of the objective over the outcome bracket, then golden-section refinement."""
    tau = check_tau(tau)
    lo, hi = ctx.bracket
    ng = int(grid_points)
    grid = lo + np.arange(ng) * ((hi - lo) / (ng - 1))
    a = ctx.arms[t]
    obj = tau * (a.first_moment - grid * a.total) + ctx.hinge_grid(t, ng)
    if not np.isfinite(obj).all():
        raise NumericalError(f"non-finite objective on the search grid (arm t={t})")
    k = int(np.argmin(obj))
    left, right = grid[max(k - 1, 0)], grid[min(k + 1, ng - 1)]
    width = rel_tol * (hi - lo)

    # inside [left, right] atoms far beyond the kernel cut are exactly linear or zero
    cut = _kernels.CUT
    live = (a.mu - cut * a.sd <= right) & (a.mu + cut * a.sd >= left)
    below = a.mu + cut * a.sd < left
    live_d = (a.y >= left) & (a.y <= right)
    below_d = a.y < left
    lin_a = a.c[below].sum() + a.d[below_d].sum()
    lin_b = a.c[below] @ a.mu[below] + a.d[below_d] @ a.y[below_d]
    c, mu, sd = a.c[live], a.mu[live], a.sd[live]
    d, y = a.d[live_d], a.y[live_d]
    base = tau * a.first_moment - lin_b

    def f(q):
        return base + q * (lin_a - tau * a.total) + _kernels.hinge_point(float(q), c, mu, sd, d, y)

    x1 = right - _GOLDEN * (right - left)
    x2 = left + _GOLDEN * (right - left)
    f1, f2 = f(x1), f(x2)
    while right - left > width:
        if f1 <= f2:
            right, x2, f2 = x2, x1, f1
            x1 = right - _GOLDEN * (right - left)
            f1 = f(x1)
        else:
            left, x1, f1 = x1, x2, f2
            x2 = left + _GOLDEN * (right - left)
            f2 = f(x2)
    q_hat = 0.5 * (left + right)
    if f(q_hat) > obj[k]:
        q_hat = float(grid[k])
    return float(q_hat)


@dataclass(frozen=True)
class QteEstimate:
    tau: float
    q1_hat: float
    q0_hat: float
    delta_hat: float
    j1_hat: float
    j0_hat: float
    v_hat: float
    n: int
    ci: ConfidenceInterval

    @property
    def ese(self) -> float:
        return self.ci.ese

    def record(self) -> dict:
        return {
            "tau": self.tau,
            "q1": self.q1_hat,
            "q0": self.q0_hat,
            "delta": self.delta_hat,
            "var": self.v_hat,
            "ese": self.ci.ese,
            "ci_low": self.ci.low,
            "ci_high": self.ci.high,
            "j1": self.j1_hat,
            "j0": self.j0_hat,
            "n": self.n,
        }


def bundle_seed(seed: int, fold: int) -> int:
    """Seed of the bundle trained without ``fold``."""
    return derive_seed(seed, 7, fold)


def fit_fold_bundles(dataset: Dataset, plan: FoldPlan, config: EstimatorConfig | None = None) -> tuple:
    cfg = config or EstimatorConfig()
    return tuple(
        fit_bundle(dataset, plan.complement(j), cfg.nuisance, seed=bundle_seed(cfg.seed, j)) for j in range(plan.k)
    )


def estimate_from_context(ctx: MomentContext, taus: Sequence[float], config: EstimatorConfig | None = None) -> list:
    cfg = config or EstimatorConfig()
    out = []
    for tau in taus:
        tau = check_tau(tau)
        q1 = solve_quantile(ctx, 1, tau, cfg.grid_points, cfg.rel_tol)
        q0 = solve_quantile(ctx, 0, tau, cfg.grid_points, cfg.rel_tol)
        j1 = estimate_J(ctx, 1, q1, cfg.j_floor)
        j0 = estimate_J(ctx, 0, q0, cfg.j_floor)
        eif = eif_values(ctx, q1, q0, j1, j0, tau)
        v = variance(eif)
        if not (math.isfinite(q1) and math.isfinite(q0) and math.isfinite(v)):
            raise NumericalError(f"non-finite estimate at tau={tau}")
        delta = q1 - q0
        ci = confidence_interval(delta, v, eif.n, cfg.ci_alpha)
        out.append(QteEstimate(tau, q1, q0, delta, j1, j0, v, eif.n, ci))
    return out


def estimate_from_bundles(
    dataset: Dataset,
    plan: FoldPlan,
    bundles,
    taus: Sequence[float],
    config: EstimatorConfig | None = None,
    bundle_transform: Callable[[NuisanceBundle], NuisanceBundle] | None = None,
) -> list:
    cfg = config or EstimatorConfig()
    if bundle_transform is not None:
        bundles = tuple(bundle_transform(b) for b in bundles)
    ctx = MomentContext.build(dataset, plan, bundles, bracket_pad=cfg.bracket_pad)
    return estimate_from_context(ctx, taus, cfg)


def estimate_qte(
    dataset: Dataset,
    k: int = 5,
    taus: Sequence[float] = (0.25, 0.5, 0.75),
    config: EstimatorConfig | None = None,
    bundle_transform: Callable[[NuisanceBundle], NuisanceBundle] | None = None,
) -> list:
    """Doubly robust QTE estimates with Wald intervals, one per ``tau``.

    All quantile levels share one fold plan and one set of fitted bundles.
    ``bundle_transform`` is applied to each fitted bundle before evaluation
    (used to study deliberately misspecified nuisances).
    """
    cfg = config or EstimatorConfig()
    taus = [check_tau(tau) for tau in taus]
    if not taus:
        raise ValidationError("at least one quantile level is required")
    plan = make_folds(dataset, k, cfg.seed)
    bundles = fit_fold_bundles(dataset, plan, cfg)
    return estimate_from_bundles(dataset, plan, bundles, taus, cfg, bundle_transform)
