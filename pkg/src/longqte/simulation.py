"""Monte Carlo study: structural data-generating process, ground truth and replication harness.

Trial sample: ``X ~ N(0, I_2)``, ``T ~ Bernoulli(0.5)``.  Observational
sample: ``X ~ N(0.5 * 1, 1.5^2 I_2)``, ``P(T=1 | X) = expit(0.25 X1 + 0.25 X2)``.
Both follow ``S = 2(X1 + X2) + T + eps_S`` and ``Y = T + 3(X1 + X2) + S + eps_Y``
with ``eps_S ~ N(0, 1)`` and ``eps_Y`` either standard normal or a unit-variance
scaled Student t.  Substituting gives ``Y(t) = 2t + 5(X1 + X2) + eps_S + eps_Y``,
a pure location shift, so the true QTE is 2 at every level.
"""

from __future__ import annotations

import csv
import io
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, ValidationError, check_tau
from .estimator import EstimatorConfig, estimate_qte
from .mixture import ConditionalMixtureModel
from .nuisance import NuisanceBundle, alpha
from .scores import ConstantScore

__all__ = [
    "NoiseSpec",
    "SimConfig",
    "SimRow",
    "SimReport",
    "TRUE_QTE",
    "generate",
    "sample_noise",
    "oracle_true_qte",
    "run_study",
    "true_bundle",
    "true_quantile",
    "TrueSampleScore",
    "worker_count",
]

TRUE_QTE = 2.0
DEFAULT_TAUS = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    kappa: int | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "scaled_t"):
            raise ValidationError(f"unknown noise kind {self.kind!r}")
        if self.kind == "scaled_t" and (self.kappa is None or int(self.kappa) <= 2):
            raise ValidationError("scaled_t noise needs integer kappa > 2")

    @classmethod
    def parse(cls, text: str, kappa: int | None = None) -> "NoiseSpec":
        text = text.strip().lower()
        if text in ("gaussian", "normal", "n01"):
            return cls("gaussian")
        for prefix in ("scaled_t", "t"):
            if text.startswith(prefix):
                rest = text[len(prefix) :]
                k = int(rest) if rest else kappa
                return cls("scaled_t", k)
        raise ValidationError(f"unknown noise law {text!r}")

    @property
    def scale(self) -> float:
        return 1.0 if self.kind == "gaussian" else math.sqrt((self.kappa - 2) / self.kappa)

    @property
    def label(self) -> str:
        return "N(0,1)" if self.kind == "gaussian" else f"sigma_{self.kappa} t({self.kappa})"


STUDY_NOISES = tuple(NoiseSpec("scaled_t", k) for k in (3, 5, 7, 9)) + (NoiseSpec("gaussian"),)


def sample_noise(noise: NoiseSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """Unit-variance outcome noise; the t law is built as a normal over a chi root."""
    z = rng.standard_normal(n)
    if noise.kind == "gaussian":
        return z
    k = int(noise.kappa)
    chi2 = np.zeros(n)
    for _ in range(k):
        chi2 += rng.standard_normal(n) ** 2
    return noise.scale * z / np.sqrt(chi2 / k)


@dataclass(frozen=True)
class SimConfig:
    n_rct: int = 1000
    n_obs: int | None = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    taus: tuple = DEFAULT_TAUS
    k_folds: int = 5
    n_reps: int = 200
    base_seed: int = 0
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)

    def __post_init__(self):
        n_obs = 5 * self.n_rct if self.n_obs is None else self.n_obs
        object.__setattr__(self, "n_obs", int(n_obs))
        object.__setattr__(self, "taus", tuple(check_tau(t) for t in self.taus))
        if not self.n_obs >= self.n_rct >= 50:
            raise ValidationError("need n_obs >= n_rct >= 50")
        if self.n_reps < 1:
            raise ValidationError("n_reps must be >= 1")


def generate(config: SimConfig, rep_seed: int) -> Dataset:
    """One pooled dataset: ``n_rct`` trial units (outcome removed) then ``n_obs`` observational units."""
    rct_ss, obs_ss = np.random.SeedSequence(int(rep_seed)).spawn(2)
    rct = np.random.Generator(np.random.Philox(rct_ss))
    obs = np.random.Generator(np.random.Philox(obs_ss))
    n1, n0 = config.n_rct, config.n_obs

    x1 = rct.standard_normal((n1, 2))
    t1 = (rct.random(n1) < 0.5).astype(np.int64)
    s1 = 2.0 * x1.sum(axis=1) + t1 + rct.standard_normal(n1)

    x0 = 0.5 + 1.5 * obs.standard_normal((n0, 2))
    t0 = (obs.random(n0) < expit(0.25 * x0[:, 0] + 0.25 * x0[:, 1])).astype(np.int64)
    s0 = 2.0 * x0.sum(axis=1) + t0 + obs.standard_normal(n0)
    y0 = t0 + 3.0 * x0.sum(axis=1) + s0 + sample_noise(config.noise, obs, n0)

    return Dataset(
        g=np.concatenate([np.ones(n1, np.int64), np.zeros(n0, np.int64)]),
        t=np.concatenate([t1, t0]),
        x=np.vstack([x1, x0]),
        s=np.concatenate([s1, s0])[:, None],
        y=np.concatenate([np.full(n1, np.nan), y0]),
    )


def _potential_outcomes(noise: NoiseSpec, t: int, n: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((n, 2))
    return 2.0 * t + 5.0 * x.sum(axis=1) + rng.standard_normal(n) + sample_noise(noise, rng, n)


def oracle_true_qte(noise: NoiseSpec, taus: Sequence[float] = DEFAULT_TAUS, n_draws: int = 10_000_000, seed: int = 0) -> dict:
    """Monte Carlo QTE in the trial population from simulated ``Y(1)`` and ``Y(0)`` draws.

    The location-shift structure fixes the answer at ``TRUE_QTE``; this is the
    numerical confirmation.  Both arms share one covariate sample (common
    random numbers) while their noise terms are drawn independently, so the
    answer is not forced to equal the shift while the error of the difference
    stays well below that of two independent samples.
    """
    if n_draws < 10_000:
        raise ValidationError("n_draws must be >= 10^4")
    taus = [check_tau(t) for t in taus]
    ssx, ss1, ss0 = np.random.SeedSequence([int(seed), 0x0AC1E]).spawn(3)
    index = 5.0 * np.random.Generator(np.random.Philox(ssx)).standard_normal((n_draws, 2)).sum(axis=1)
    q = {}
    for t, ss in ((1, ss1), (0, ss0)):
        rng = np.random.Generator(np.random.Philox(ss))
        y = 2.0 * t + index + rng.standard_normal(n_draws) + sample_noise(noise, rng, n_draws)
        q[t] = np.quantile(y, taus)
        del y
    return {tau: float(a - b) for tau, a, b in zip(taus, q[1], q[0])}


def true_quantile(t: int, tau: float) -> float:
    """Exact ``tau``-quantile of ``Y(t)`` in the trial population under Gaussian noise: ``N(2t, 52)``."""
    from scipy.special import ndtri

    return 2.0 * t + math.sqrt(52.0) * float(ndtri(tau))


# ---------------------------------------------------------------- true nuisances


@dataclass(frozen=True)
class TrueSampleScore:
    """Exact ``P(G=1 | S, X, T=t)`` implied by the design; S carries no extra information."""

    t: int
    nu: float

    def predict(self, features):
        x = np.asarray(features, dtype=float)[:, -2:]
        log_rct = -0.5 * np.sum(x * x, axis=1) - math.log(2 * math.pi)
        log_obs = -0.5 * np.sum((x - 0.5) ** 2, axis=1) / 2.25 - math.log(2 * math.pi * 2.25)
        p_obs = expit(0.25 * x[:, 0] + 0.25 * x[:, 1])
        p_obs = p_obs if self.t == 1 else 1.0 - p_obs
        logit = math.log(self.nu / (1 - self.nu)) + log_rct - log_obs + math.log(0.5) - np.log(p_obs)
        return expit(logit)


def true_bundle(nu: float, mc_draws: int = 200, seed: int = 0) -> NuisanceBundle:
    """Bundle of exact nuisance functions for the Gaussian-noise design.

    Outcome models: ``Y | s, x, t ~ N(t + s + 3 x1 + 3 x2, 1)`` on conditioning ``[s, x1, x2]``.
    Surrogate models: ``S | x, t ~ N(t + 2 x1 + 2 x2, 1)``.
    """
    outcome = tuple(ConditionalMixtureModel.gaussian([t, 1.0, 3.0, 3.0]) for t in (0, 1))
    surrogate = tuple(ConditionalMixtureModel.gaussian([t, 2.0, 2.0]) for t in (0, 1))
    return NuisanceBundle(
        e_model=ConstantScore(0.5),
        g_models=(TrueSampleScore(0, nu), TrueSampleScore(1, nu)),
        outcome_models=outcome,
        surrogate_models=surrogate,
        mc_draws=mc_draws,
        rng_seed=seed,
    )


# ---------------------------------------------------------------- study harness


@dataclass(frozen=True)
class SimRow:
    noise: NoiseSpec
    n_rct: int
    tau: float
    bias: float
    sd: float
    ese: float
    cp95: float
    n_reps: int
    failures: int
    sd_defined: bool = True


@dataclass
class SimReport:
    rows: list
    wall_time: float = 0.0
    estimates: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    CSV_COLUMNS = ("noise", "kappa", "n_rct", "tau", "bias", "sd", "ese", "cp95", "n_reps", "failures")

    def row(self, tau: float, noise: NoiseSpec | None = None, n_rct: int | None = None) -> SimRow:
        for r in self.rows:
            if r.tau == tau and (noise is None or r.noise == noise) and (n_rct is None or r.n_rct == n_rct):
                return r
        raise KeyError((tau, noise, n_rct))

    @property
    def failures(self) -> int:
        return max((r.failures for r in self.rows), default=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for r in self.rows:
            w.writerow(
                [
                    r.noise.kind,
                    "" if r.noise.kappa is None else r.noise.kappa,
                    r.n_rct,
                    repr(r.tau),
                    repr(r.bias),
                    repr(r.sd),
                    repr(r.ese),
                    repr(r.cp95),
                    r.n_reps,
                    r.failures,
                ]
            )
        return buf.getvalue()

    def to_table(self) -> str:
        """Summary layout: one line per (noise, n_rct), Bias(SD) ESE CP95 per tau."""
        taus = sorted({r.tau for r in self.rows})
        keys = []
        for r in self.rows:
            key = (r.noise, r.n_rct)
            if key not in keys:
                keys.append(key)
        head = f"{'eps_Y':<16}{'n_rct':>6}" + "".join(f" | tau={t:<4g} Bias (SD)      ESE   CP95" for t in taus)
        lines = [head, "-" * len(head)]
        for noise, n in keys:
            cells = []
            for t in taus:
                r = self.row(t, noise, n)
                sd = f"{r.sd:.2f}" if r.sd_defined else "  --"
                cells.append(f" | {r.bias:>8.3f} ({sd})  {r.ese:>8.2f} {100 * r.cp95:>6.1f}")
            lines.append(f"{noise.label:<16}{n:>6}" + "".join(cells))
        return "\n".join(lines) + "\n"


def worker_count() -> int:
    env = os.environ.get("LONGQTE_THREADS")
    n = os.cpu_count() or 1
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            raise ValidationError(f"LONGQTE_THREADS must be an integer, got {env!r}") from None
    return n


def _one_rep(args):
    config, rep = args
    seed = config.base_seed + rep
    try:
        data = generate(config, seed)
        est_cfg = replace(config.estimator, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = estimate_qte(data, config.k_folds, config.taus, est_cfg)
        return rep, [(e.tau, e.delta_hat, e.ese, e.ci.low, e.ci.high) for e in res], None
    except Exception as exc:  # a failed replication is counted, not fatal
        return rep, None, f"{type(exc).__name__}: {exc}"


def run_study(config: SimConfig, workers: int | None = None, truth: float = TRUE_QTE, progress=None) -> SimReport:
    """Run ``n_reps`` replications with seeds ``base_seed + r`` and aggregate per tau.

    Results are reduced in replication order, so the report does not depend on
    scheduling.
    """
    workers = worker_count() if workers is None else max(1, int(workers))
    check = oracle_true_qte(config.noise, config.taus, n_draws=200_000, seed=config.base_seed)
    for tau, val in check.items():
        if abs(val - truth) > 0.25:
            warnings.warn(f"Monte Carlo truth check at tau={tau}: {val:.3f} vs {truth}", RuntimeWarning, stacklevel=2)
    start = time.perf_counter()
    jobs = [(config, r) for r in range(config.n_reps)]
    if workers > 1 and config.n_reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_rep, jobs, chunksize=1))
    else:
        results = []
        for job in jobs:
            results.append(_one_rep(job))
            if progress is not None:
                progress(len(results), config.n_reps)
    results.sort(key=lambda r: r[0])
    ok = [r for r in results if r[1] is not None]
    failures = len(results) - len(ok)
    rows = []
    estimates = {}
    for i, tau in enumerate(config.taus):
        est = np.array([r[1][i][1] for r in ok])
        ese = np.array([r[1][i][2] for r in ok])
        cover = np.array([r[1][i][3] <= truth <= r[1][i][4] for r in ok])
        m = est.size
        estimates[tau] = {"delta": est, "ese": ese, "cover": cover}
        rows.append(
            SimRow(
                noise=config.noise,
                n_rct=config.n_rct,
                tau=tau,
                bias=float(est.mean() - truth) if m else math.nan,
                sd=float(est.std(ddof=1)) if m > 1 else 0.0,
                ese=float(ese.mean()) if m else math.nan,
                cp95=float(cover.mean()) if m else math.nan,
                n_reps=m,
                failures=failures,
                sd_defined=m > 1,
            )
        )
    errors = [r[2] for r in results if r[2] is not None]
    return SimReport(rows, time.perf_counter() - start, estimates, errors)
