import math

import numpy as np
import pytest
from scipy.special import ndtri

import longqte.estimator as est
from longqte import _kernels
from longqte.data import make_folds
from longqte.estimator import (
    EstimatorConfig,
    MomentContext,
    NumericalError,
    estimate_qte,
    moment_value,
    objective_value,
    solve_quantile,
)
from longqte.mixture import ConditionalMixtureModel
from longqte.nuisance import NuisanceBundle, NuisanceConfig
from longqte.scores import ConstantScore
from longqte.simulation import SimConfig, generate, true_bundle, true_quantile

from conftest import cell_dataset, random_context

FAST = EstimatorConfig(nuisance=NuisanceConfig(mc_draws=30, em_max_iter=80))


def plain_bundle(mean=0.0, g_score=1e-9):
    """Outcome N(mean, 1) ignoring (s, x); sample scores ~0 so the observational terms vanish."""
    return NuisanceBundle(
        e_model=ConstantScore(0.5),
        g_models=(ConstantScore(g_score), ConstantScore(g_score)),
        outcome_models=(ConditionalMixtureModel.gaussian([mean, 0.0, 0.0, 0.0]),) * 2,
        surrogate_models=(ConditionalMixtureModel.gaussian([0.0, 1.0, 1.0]),) * 2,
        mc_draws=7,
    )


@pytest.fixture(scope="module")
def plain_ctx():
    d = cell_dataset((40, 40, 20, 20), seed=3)
    plan = make_folds(d, 4, 0)
    return MomentContext.build(d, plan, [plain_bundle()] * 4)


def test_collapses_to_transported_loss(plain_ctx):
    ctx, tau = plain_ctx, 0.3
    d = ctx.dataset
    model = ctx.bundles[0].outcome_models[0]
    rct = np.flatnonzero(d.g == 1)
    for q in (-1.0, 0.2, 1.5):
        loss = model.expected_qloss(np.zeros((1, 3)), q, tau)[0]
        expected = float(np.sum(ctx.unit_weight[rct])) * loss / ctx.nu_hat
        assert objective_value(ctx, 0, q, tau) == pytest.approx(expected, rel=1e-7)


@pytest.mark.parametrize("tau", [0.5, 0.1, 0.9])
def test_solves_standard_normal_quantile(plain_ctx, tau):
    q = solve_quantile(plain_ctx, 1, tau)
    assert q == pytest.approx(float(ndtri(tau)), abs=1e-6)


def test_solver_is_deterministic(plain_ctx):
    a = solve_quantile(plain_ctx, 0, 0.37)
    b = solve_quantile(plain_ctx, 0, 0.37)
    assert a == b


def test_moment_limits_bracket_the_root():
    ctx = random_context(11)
    lo, hi = ctx.dataset.outcome_range()
    span = hi - lo
    for t in (0, 1):
        a = ctx.arms[t]
        low = moment_value(ctx, t, lo - 10 * span, 0.4)
        high = moment_value(ctx, t, hi + 10 * span, 0.4)
        assert low == pytest.approx(-0.4 * a.total, abs=1e-9)
        assert high == pytest.approx(0.6 * a.total, abs=1e-9)
        assert a.total > 0 and low < 0 < high


def _fd_points(ctx, t, rng, h, count=5):
    y = ctx.arms[t].y
    lo, hi = ctx.bracket
    out = []
    while len(out) < count:
        q = rng.uniform(lo, hi)
        if y.size == 0 or np.min(np.abs(y - q)) > 2 * h:
            out.append(q)
    return out


@pytest.mark.parametrize("seed", range(12))
def test_moment_is_objective_derivative(seed):
    ctx = random_context(seed)
    rng = np.random.default_rng(seed)
    h = 1e-4
    for t in (0, 1):
        for q in _fd_points(ctx, t, rng, h):
            tau = float(rng.uniform(0.05, 0.95))
            fd = (objective_value(ctx, t, q + h, tau) - objective_value(ctx, t, q - h, tau)) / (2 * h)
            assert abs(fd - moment_value(ctx, t, q, tau)) <= 1e-4


def test_psi_units_average_to_moment():
    ctx = random_context(3)
    for t in (0, 1):
        psi = ctx.psi_units(t, 0.4, 0.6)
        assert float(ctx.unit_weight @ psi) == pytest.approx(moment_value(ctx, t, 0.4, 0.6), abs=1e-12)


def test_argmin_invariant_to_nu():
    rng_ctx = random_context(5)
    d, plan, bundles = rng_ctx.dataset, rng_ctx.plan, rng_ctx.bundles
    base = MomentContext.build(d, plan, bundles)
    scaled = MomentContext.build(d, plan, bundles, nu=3.7 * base.nu_hat)
    width = 1e-8 * (base.bracket[1] - base.bracket[0])
    for t in (0, 1):
        assert abs(solve_quantile(base, t, 0.5) - solve_quantile(scaled, t, 0.5)) <= 2 * width


def test_indicator_part_monotone_with_nonnegative_weights():
    ctx = random_context(8)
    for t in (0, 1):
        a = ctx.arms[t]
        keep = a.c >= 0
        grid = np.linspace(*ctx.bracket, 300)
        vals = [
            _kernels.cdf_point(q, a.c[keep], a.mu[keep], a.sd[keep], a.d, a.y) for q in grid
        ]
        assert np.all(np.diff(vals) >= -1e-15)


def test_cross_fitting_audit(sim_small):
    plan = make_folds(sim_small, 3, 0)
    bundles = est.fit_fold_bundles(sim_small, plan, FAST)
    ctx = MomentContext.build(sim_small, plan, bundles)
    assert ctx.training_audit()
    for j, b in enumerate(bundles):
        assert np.intersect1d(b.training_index, plan.fold(j)).size == 0
    swapped = (bundles[1], bundles[0], bundles[2])
    with pytest.raises(ValueError, match="own fold"):
        MomentContext.build(sim_small, plan, swapped)


def test_non_finite_objective_is_an_error(plain_ctx):
    bad = NuisanceBundle(**{**plain_bundle().__dict__, "outcome_models": (ConditionalMixtureModel.gaussian([np.nan, 0, 0, 0]),) * 2})
    ctx = MomentContext.build(plain_ctx.dataset, plain_ctx.plan, [bad] * plain_ctx.plan.k)
    with pytest.raises(NumericalError):
        solve_quantile(ctx, 0, 0.5)


def test_taus_share_one_bundle_set(sim_small, monkeypatch):
    calls = []
    real = est.fit_bundle

    def counting(*args, **kwargs):
        calls.append(1)
        return real(*args, **kwargs)

    monkeypatch.setattr(est, "fit_bundle", counting)
    res = estimate_qte(sim_small, 3, (0.25, 0.5, 0.75), FAST)
    assert len(res) == 3 and len(calls) == 3
    for r in res:
        assert r.delta_hat == r.q1_hat - r.q0_hat
        assert r.j1_hat > 0 and r.j0_hat > 0 and r.v_hat >= 0


def test_smallest_configuration():
    d = generate(SimConfig(n_rct=50, n_obs=150), 3)
    assert d.n == 200
    with pytest.warns(RuntimeWarning):
        res = estimate_qte(d, 2, (0.5,), FAST)
    assert math.isfinite(res[0].delta_hat)


@pytest.fixture(scope="module")
def true_ctx():
    d = generate(SimConfig(n_rct=16_667, n_obs=83_333), 99)
    plan = make_folds(d, 5, 0)
    bundles = [true_bundle(d.nu_hat, mc_draws=50, seed=j) for j in range(5)]
    return MomentContext.build(d, plan, bundles)


def test_moment_near_zero_at_truth(true_ctx):
    n = true_ctx.dataset.n
    assert n == 100_000
    for t in (0, 1):
        for tau in (0.25, 0.5, 0.75):
            q = true_quantile(t, tau)
            psi = true_ctx.psi_units(t, q, tau)
            assert abs(moment_value(true_ctx, t, q, tau)) <= 3 * psi.std() / math.sqrt(n)


def test_objective_unimodal_on_design(sim_2000):
    plan = make_folds(sim_2000, 5, 0)
    ctx = MomentContext.build(sim_2000, plan, est.fit_fold_bundles(sim_2000, plan, EstimatorConfig()))
    grid = np.linspace(*ctx.bracket, 200)
    for t in (0, 1):
        a = ctx.arms[t]
        vals = 0.5 * (a.first_moment - grid * a.total) + ctx.hinge_grid(t, 200)
        probe = [0, 57, 199]
        assert np.allclose(vals[probe], [objective_value(ctx, t, grid[i], 0.5) for i in probe], rtol=1e-9)
        k = int(np.argmin(vals))
        scale = np.ptp(vals)
        # descending before the minimum and ascending after, up to Monte Carlo noise
        assert np.all(np.diff(vals[: k + 1]) <= 1e-6 * scale)
        assert np.all(np.diff(vals[k:]) >= -1e-6 * scale)


def test_true_nuisances_large_trial():
    d = generate(SimConfig(n_rct=100_000), 7)
    plan = make_folds(d, 5, 1)
    ctx = MomentContext.build(d, plan, [true_bundle(d.nu_hat, mc_draws=10, seed=j) for j in range(5)])
    delta = solve_quantile(ctx, 1, 0.5) - solve_quantile(ctx, 0, 0.5)
    assert delta == pytest.approx(2.0, abs=0.05)


def test_single_run_on_design(sim_2000):
    res = estimate_qte(sim_2000, 5, (0.5,))
    assert abs(res[0].delta_hat - 2.0) <= 0.15
