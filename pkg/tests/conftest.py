import numpy as np
import pytest

from longqte.data import Dataset
from longqte.simulation import SimConfig, generate


def cell_dataset(sizes=(40, 40, 10, 10), seed=0, d_x=2):
    """Toy dataset with cell sizes ordered (g0t0, g0t1, g1t0, g1t1)."""
    rng = np.random.default_rng(seed)
    g, t = [], []
    for (gg, tt), m in zip([(0, 0), (0, 1), (1, 0), (1, 1)], sizes):
        g += [gg] * m
        t += [tt] * m
    g, t = np.array(g), np.array(t)
    n = g.size
    x = rng.normal(size=(n, d_x))
    s = x.sum(axis=1, keepdims=True) + t[:, None] + rng.normal(size=(n, 1))
    y = np.where(g == 0, s[:, 0] + x.sum(axis=1) + rng.normal(size=n), np.nan)
    return Dataset(g=g, t=t, x=x, s=s, y=y)


@pytest.fixture(scope="session")
def sim_small():
    return generate(SimConfig(n_rct=300), 5)


@pytest.fixture(scope="session")
def sim_2000():
    return generate(SimConfig(n_rct=2000), 2024)


def random_mixture(rng, m=None, p=2):
    """Scalar-response mixture with random parameters on a ``p``-dimensional condition."""
    from longqte.mixture import ConditionalMixtureModel

    m = int(rng.integers(1, 5)) if m is None else m
    return ConditionalMixtureModel(
        weight_coef=rng.normal(size=(m, p + 1)),
        mean_coef=rng.normal(scale=2.0, size=(m, 1, p + 1)),
        log_sd_coef=rng.normal(scale=0.3, size=(m, 1, p + 1)),
        sd_floor=np.array([1e-3]),
    )


def random_bundle(rng, d_x=2, d_s=1, mc_draws=5, seed=0):
    """Nuisance bundle with random (not fitted) parameters; for algebraic checks."""
    from longqte.mixture import ConditionalMixtureModel
    from longqte.nuisance import NuisanceBundle
    from longqte.scores import LogisticScoreModel

    def score(p):
        return LogisticScoreModel(rng.normal(scale=0.5, size=p + 1), "identity", 0.01)

    def mixture(p, dim, m):
        return ConditionalMixtureModel(
            weight_coef=rng.normal(size=(m, p + 1)),
            mean_coef=rng.normal(size=(m, dim, p + 1)),
            log_sd_coef=rng.normal(scale=0.2, size=(m, dim, p + 1)),
            sd_floor=np.full(dim, 1e-3),
        )

    return NuisanceBundle(
        e_model=score(d_x),
        g_models=(score(d_s + d_x), score(d_s + d_x)),
        outcome_models=tuple(mixture(d_s + d_x, 1, int(rng.integers(1, 4))) for _ in range(2)),
        surrogate_models=tuple(mixture(d_x, d_s, int(rng.integers(1, 3))) for _ in range(2)),
        mc_draws=mc_draws,
        rng_seed=seed,
    )


def random_context(seed):
    from longqte.data import make_folds
    from longqte.estimator import MomentContext

    rng = np.random.default_rng(seed)
    sizes = tuple(int(v) for v in rng.integers(6, 20, size=4))
    data = cell_dataset(sizes, seed=seed)
    k = int(rng.integers(2, 5))
    plan = make_folds(data, k, seed)
    bundles = [random_bundle(rng, seed=seed * 10 + j) for j in range(plan.k)]
    return MomentContext.build(data, plan, bundles)
