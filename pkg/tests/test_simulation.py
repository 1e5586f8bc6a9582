import csv
import io

import numpy as np
import pytest
from scipy import stats

from longqte.data import ValidationError
from longqte.estimator import EstimatorConfig
from longqte.nuisance import NuisanceConfig
from longqte.simulation import (
    STUDY_NOISES,
    NoiseSpec,
    SimConfig,
    SimReport,
    SimRow,
    generate,
    oracle_true_qte,
    run_study,
    sample_noise,
    true_quantile,
    worker_count,
)

TINY = EstimatorConfig(nuisance=NuisanceConfig(mc_draws=10, em_max_iter=40, n_restarts=1))


def test_trial_assignment_fraction():
    d = generate(SimConfig(n_rct=500), 4)
    frac = d.t[d.g == 1].mean()
    assert abs(frac - 0.5) <= 0.07


def test_structural_regression_recovered():
    d = generate(SimConfig(n_rct=20_000, n_obs=100_000), 8)
    obs = d.g == 0
    design = np.column_stack([np.ones(obs.sum()), d.t[obs], d.x[obs], d.s[obs]])
    coef = np.linalg.lstsq(design, d.y[obs], rcond=None)[0]
    assert np.all(np.abs(coef[1:] - [1, 3, 3, 1]) <= 0.05)


def test_outcome_presence_and_layout():
    cfg = SimConfig(n_rct=200)
    d = generate(cfg, 1)
    assert d.n1 == 200 and d.n0 == 1000
    assert np.isnan(d.y[:200]).all() and np.isfinite(d.y[200:]).all()
    assert generate(cfg, 1).equals(d)
    assert not generate(cfg, 2).equals(d)


def test_observational_covariate_law():
    d = generate(SimConfig(n_rct=10_000), 3)
    x0 = d.x[d.g == 0]
    assert np.allclose(x0.mean(axis=0), 0.5, atol=0.03)
    assert np.allclose(x0.std(axis=0), 1.5, atol=0.03)


def _noise_draws(noise, n=100_000):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(2026)))
    return sample_noise(noise, rng, n)


HEAVY_TAIL = pytest.mark.xfail(
    strict=True,
    reason="t(3) has an infinite fourth moment; its 10^5-draw sample variance lands within 0.02 of 1 for only about a third of seeds",
)


@pytest.mark.parametrize(
    "noise",
    [pytest.param(n, marks=HEAVY_TAIL) if n.kind != "gaussian" and n.kappa <= 4 else n for n in STUDY_NOISES],
    ids=lambda n: n.label,
)
def test_noise_has_unit_variance(noise):
    assert abs(_noise_draws(noise).var() - 1.0) <= 0.02


@pytest.mark.parametrize("noise", STUDY_NOISES, ids=lambda n: n.label)
def test_noise_matches_scaled_law(noise):
    # with an infinite fourth moment the sample variance is too erratic to pin; test the law instead
    law = stats.norm() if noise.kind == "gaussian" else stats.t(noise.kappa, scale=noise.scale)
    eps = _noise_draws(noise)
    assert stats.kstest(eps, law.cdf).pvalue > 1e-3
    iqr = np.subtract(*np.quantile(eps, [0.75, 0.25]))
    assert iqr == pytest.approx(law.ppf(0.75) - law.ppf(0.25), rel=0.02)
    assert law.var() == pytest.approx(1.0)


def test_noise_parsing():
    assert NoiseSpec.parse("t3") == NoiseSpec("scaled_t", 3)
    assert NoiseSpec.parse("scaled_t", kappa=7) == NoiseSpec("scaled_t", 7)
    assert NoiseSpec.parse("gaussian").scale == 1.0
    with pytest.raises(ValidationError):
        NoiseSpec("scaled_t", 2)
    with pytest.raises(ValidationError):
        NoiseSpec.parse("laplace")


def test_oracle_low_precision():
    truth = oracle_true_qte(NoiseSpec(), [0.5], n_draws=10_000, seed=0)
    assert truth[0.5] == pytest.approx(2.0, abs=0.1)
    with pytest.raises(ValidationError):
        oracle_true_qte(NoiseSpec(), [0.5], n_draws=999)


def test_potential_outcome_medians():
    assert true_quantile(0, 0.5) == 0.0 and true_quantile(1, 0.5) == 2.0
    from longqte.simulation import _potential_outcomes

    rng = np.random.default_rng(0)
    for t in (0, 1):
        assert np.median(_potential_outcomes(NoiseSpec("scaled_t", 3), t, 200_000, rng)) == pytest.approx(2 * t, abs=0.05)


def test_oracle_error_rate():
    sizes = np.array([10_000, 100_000, 1_000_000])
    rmse = []
    for n in sizes:
        errs = [oracle_true_qte(NoiseSpec(), [0.25, 0.5, 0.75], int(n), seed=s) for s in range(8)]
        rmse.append(np.sqrt(np.mean([(v - 2.0) ** 2 for e in errs for v in e.values()])))
    slope = np.polyfit(np.log(sizes), np.log(rmse), 1)[0]
    assert -0.65 <= slope <= -0.35


def test_single_replication_report():
    cfg = SimConfig(n_rct=100, n_reps=1, taus=(0.5,), k_folds=3, estimator=TINY)
    rep = run_study(cfg, workers=1)
    row = rep.row(0.5)
    assert row.sd == 0.0 and not row.sd_defined
    assert row.bias == pytest.approx(rep.estimates[0.5]["delta"][0] - 2.0)
    assert row.failures == 0 and row.n_reps == 1
    assert "--" in rep.to_table()


def test_study_is_reproducible():
    cfg = SimConfig(n_rct=100, n_reps=3, taus=(0.25, 0.75), k_folds=3, estimator=TINY, base_seed=40)
    a, b = run_study(cfg, workers=1), run_study(cfg, workers=1)
    assert a.to_csv() == b.to_csv()
    shifted = run_study(SimConfig(**{**cfg.__dict__, "base_seed": 42, "n_reps": 1}), workers=1)
    # seed base + r gives the same replication regardless of where the range starts
    assert shifted.estimates[0.25]["delta"][0] == a.estimates[0.25]["delta"][2]


def test_report_layouts():
    rows = [
        SimRow(n, size, tau, 0.01, 0.5, 0.55, 0.96, 200, 0)
        for n in (NoiseSpec("scaled_t", 3), NoiseSpec())
        for size in (500, 1000)
        for tau in (0.25, 0.5, 0.75)
    ]
    rep = SimReport(rows)
    parsed = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert list(parsed[0]) == ["noise", "kappa", "n_rct", "tau", "bias", "sd", "ese", "cp95", "n_reps", "failures"]
    assert len(parsed) == 12 and parsed[0]["kappa"] == "3" and parsed[-1]["kappa"] == ""
    table = rep.to_table().splitlines()
    assert len(table) == 2 + 4
    assert all(f"tau={t:g}" in table[0] for t in (0.25, 0.5, 0.75))
    assert table[2].startswith("sigma_3 t(3)") and "96.0" in table[2]


def test_config_validation(monkeypatch):
    with pytest.raises(ValidationError):
        SimConfig(n_rct=10)
    with pytest.raises(ValidationError):
        SimConfig(taus=(1.5,))
    assert SimConfig(n_rct=300).n_obs == 1500
    monkeypatch.setenv("LONGQTE_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.setenv("LONGQTE_THREADS", "many")
    with pytest.raises(ValidationError):
        worker_count()
