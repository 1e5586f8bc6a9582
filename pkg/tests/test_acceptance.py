"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

Run alone with ``pytest tests/test_acceptance.py -v``; about two hours on one
core, most of it in the replication studies (criteria 2 and 3).
"""

import json
import math
import time
import warnings

import numpy as np
import pytest
from scipy.stats import norm

import longqte.cli as cli
from longqte.data import make_folds, write_dataset
from longqte.estimator import EstimatorConfig, MomentContext, estimate_from_bundles, fit_fold_bundles, moment_value, objective_value
from longqte.inference import eif_values, variance
from longqte.mixture import check_loss
from longqte.simulation import STUDY_NOISES, DEFAULT_TAUS, NoiseSpec, SimConfig, generate, run_study, true_bundle, true_quantile

from conftest import random_context, random_mixture
from test_inference import direct_phi

pytestmark = pytest.mark.slow


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


def test_criterion_1_oracle_truth(capsys, tmp_path):
    worst, slowest = 0.0, 0.0
    for noise in STUDY_NOISES:
        out = tmp_path / "oracle.json"
        start = time.perf_counter()
        name = "gaussian" if noise.kind == "gaussian" else f"t{noise.kappa}"
        code = cli.main(["oracle", "--draws", "10000000", "--noise", name, "--format", "json", "--out", str(out)])
        slowest = max(slowest, time.perf_counter() - start)
        assert code == 0
        truth = json.loads(out.read_text())["truth"]
        assert [r["tau"] for r in truth] == list(DEFAULT_TAUS)
        worst = max(worst, max(abs(r["qte"] - 2.0) for r in truth))
    ok = worst <= 0.01 and slowest <= 120
    report(capsys, 1, ok, f"max |QTE - 2| = {worst:.4f} over 5 noise laws x 3 tau (<= 0.01); slowest run {slowest:.1f}s (<= 120s)")


def _study_checks(rep, sd_band):
    row = rep.row(0.5)
    ratio = row.ese / row.sd
    checks = {
        f"|bias| {abs(row.bias):.3f} <= 0.15": abs(row.bias) <= 0.15,
        f"SD {row.sd:.3f} in [{sd_band[0]:.3f}, {sd_band[1]:.3f}]": sd_band[0] <= row.sd <= sd_band[1],
        f"ESE/SD {ratio:.2f} in [0.8, 1.4]": 0.8 <= ratio <= 1.4,
        f"CP95 {row.cp95:.3f} in [0.90, 0.99]": 0.90 <= row.cp95 <= 0.99,
        f"failures {row.failures} == 0": row.failures == 0,
    }
    return checks, row


def test_criterion_2_desk_scale_replication(capsys):
    # bands for the t(3) row scale the gaussian band [0.45, 0.80] around its reference SD 0.60 to reference SD 0.86
    cells = [
        ("gaussian n_rct=1000", NoiseSpec(), 1000, (0.45, 0.80), 20_000),
        ("sigma_3 t(3) n_rct=500", NoiseSpec("scaled_t", 3), 500, (0.45 / 0.60 * 0.86, 0.80 / 0.60 * 0.86), 30_000),
    ]
    parts, ok = [], True
    for label, noise, n_rct, band, seed in cells:
        cfg = SimConfig(n_rct=n_rct, n_obs=5 * n_rct, noise=noise, taus=(0.5,), k_folds=5, n_reps=200, base_seed=seed)
        rep = run_study(cfg)
        checks, row = _study_checks(rep, band)
        failed = [k for k, v in checks.items() if not v]
        ok &= not failed
        parts.append(f"{label}: bias {row.bias:+.3f} SD {row.sd:.3f} ESE {row.ese:.3f} CP {100 * row.cp95:.1f} ({rep.wall_time / 60:.0f} min)" + (f" FAILED {'; '.join(failed)}" if failed else ""))
    report(capsys, 2, ok, " | ".join(parts))


def test_criterion_3_double_robustness(capsys):
    variants = {
        "scores zeroed": lambda b: b.with_zeroed_scores(),
        "outcome shifted": lambda b: b.with_outcome_shift(5.0),
        "both": lambda b: b.with_outcome_shift(5.0).with_zeroed_scores(),
    }
    est = {k: [] for k in variants}
    for r in range(50):
        seed = 40_000 + r
        data = generate(SimConfig(n_rct=4000), seed)
        cfg = EstimatorConfig(seed=seed)
        plan = make_folds(data, 5, cfg.seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            bundles = fit_fold_bundles(data, plan, cfg)
            for name, transform in variants.items():
                est[name].append(estimate_from_bundles(data, plan, bundles, [0.5], cfg, transform)[0].delta_hat)
    bias = {k: float(np.mean(v)) - 2.0 for k, v in est.items()}
    ok = abs(bias["scores zeroed"]) <= 0.2 and abs(bias["outcome shifted"]) <= 0.2 and abs(bias["both"]) > 0.5
    detail = ", ".join(f"{k} mean bias {v:+.3f}" for k, v in bias.items())
    report(capsys, 3, ok, f"{detail} (first two <= 0.2, both > 0.5; 50 reps at n_rct=4000)")


def test_criterion_4_moment_objective_duality(capsys):
    h, worst, checked = 1e-4, 0.0, 0
    taus = [round(0.1 * i, 1) for i in range(1, 10)]
    for seed in range(100):
        ctx = random_context(1000 + seed)
        rng = np.random.default_rng(seed)
        lo, hi = ctx.bracket
        for t in (0, 1):
            y = ctx.arms[t].y
            for tau in taus:
                while True:  # stay clear of the indicator kinks, where no derivative exists
                    q = float(rng.uniform(lo, hi))
                    if y.size == 0 or np.min(np.abs(y - q)) > 2 * h:
                        break
                fd = (objective_value(ctx, t, q + h, tau) - objective_value(ctx, t, q - h, tau)) / (2 * h)
                worst = max(worst, abs(fd - moment_value(ctx, t, q, tau)))
                checked += 1
    report(capsys, 4, worst <= 1e-4, f"max |FD - moment| = {worst:.2e} over {checked} checks on 100 contexts (<= 1e-4)")


def test_criterion_5_eif_sanity(capsys):
    d = generate(SimConfig(n_rct=16_667, n_obs=83_333), 555)
    assert d.n == 100_000
    plan = make_folds(d, 5, 0)
    ctx = MomentContext.build(d, plan, [true_bundle(d.nu_hat, mc_draws=50, seed=j) for j in range(5)])
    worst_z = 0.0
    for t in (0, 1):
        for tau in DEFAULT_TAUS:
            psi = ctx.psi_units(t, true_quantile(t, tau), tau)
            worst_z = max(worst_z, abs(psi.mean()) / (psi.std() / math.sqrt(d.n)))
    tau = 0.5
    f = norm.pdf(0.0, scale=math.sqrt(52.0))
    v = variance(eif_values(ctx, true_quantile(1, tau), true_quantile(0, tau), f, f, tau))
    v_direct = float(np.var(direct_phi(d, d.nu_hat, tau)))
    rel = abs(v / v_direct - 1)
    ok = worst_z <= 3 and rel <= 0.05
    report(capsys, 5, ok, f"max |mean psi| / SE = {worst_z:.2f} (<= 3); variance {v:.1f} vs direct {v_direct:.1f}, rel diff {rel:.3f} (<= 0.05)")


def test_criterion_6_mixture_consistency(capsys):
    rng = np.random.default_rng(66)
    bad = []
    h = 1e-4
    worst = {"pdf": 0.0, "dloss": 0.0, "mc z": 0.0}
    for i in range(50):
        p = int(rng.integers(1, 4))
        model = random_mixture(rng, p=p)
        cond = rng.normal(size=(1, p))
        draws = model.sample(cond, rng.uniform(size=(1, 1_000_000)), rng.standard_normal((1, 1_000_000, 1)))[0, :, 0]
        qs = np.quantile(draws, np.linspace(0.01, 0.99, 25))
        grid = np.linspace(qs[0] - 5, qs[-1] + 5, 400)
        cdf = np.array([model.cdf(cond, q)[0] for q in grid])
        if np.any(np.diff(cdf) < 0) or cdf.min() < 0 or cdf.max() > 1:
            bad.append(f"model {i}: cdf")
        for q in qs:
            tau = float(rng.uniform(0.05, 0.95))
            fd_cdf = (model.cdf(cond, q + h)[0] - model.cdf(cond, q - h)[0]) / (2 * h)
            worst["pdf"] = max(worst["pdf"], abs(fd_cdf - model.pdf(cond, q)[0]))
            fd_loss = (model.expected_qloss(cond, q + h, tau)[0] - model.expected_qloss(cond, q - h, tau)[0]) / (2 * h)
            worst["dloss"] = max(worst["dloss"], abs(fd_loss - (model.cdf(cond, q)[0] - tau)))
        q, tau = float(qs[int(rng.integers(25))]), float(rng.uniform(0.05, 0.95))
        loss = check_loss(draws - q, tau)
        z = abs(loss.mean() - model.expected_qloss(cond, q, tau)[0]) / (loss.std() / math.sqrt(loss.size))
        worst["mc z"] = max(worst["mc z"], z)
    ok = not bad and worst["pdf"] <= 1e-4 and worst["dloss"] <= 1e-4 and worst["mc z"] <= 3
    detail = f"max |dCDF - pdf| {worst['pdf']:.1e}, max |dloss - (CDF - tau)| {worst['dloss']:.1e} (<= 1e-4), max MC z {worst['mc z']:.2f} (<= 3) over 50 mixtures"
    report(capsys, 6, ok, detail + (f"; {bad}" if bad else ""))


def test_criterion_7_byte_identical_runs(capsys, tmp_path):
    data = tmp_path / "design.csv"
    write_dataset(generate(SimConfig(n_rct=300), 77), data)
    runs = {
        "estimate": ["estimate", "--input", str(data), "--draws", "30"],
        "curve": ["curve", "--input", str(data), "--draws", "30", "--tau", "0.2,0.4,0.6,0.8"],
        "simulate": ["simulate", "--n-rct", "100", "--reps", "2", "--folds", "3", "--draws", "10", "--tau", "0.5"],
        "oracle": ["oracle", "--draws", "100000", "--format", "json"],
    }
    same = {}
    for name, argv in runs.items():
        out = tmp_path / f"{name}.out"
        docs = []
        for _ in range(2):
            assert cli.main([*argv, "--out", str(out)]) == 0
            files = sorted(tmp_path.glob(f"{name}.out*"))
            docs.append([f.read_bytes() for f in files])
        same[name] = docs[0] == docs[1]
    capsys.readouterr()
    report(capsys, 7, all(same.values()), ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
