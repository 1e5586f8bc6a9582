"""Nuisance models for one cross-fitting fold and the transport step.

A :class:`NuisanceBundle` holds, for one training index set,

* ``e_model``: trial propensity ``P(T=1 | X, G=1)``
* ``g_models[t]``: sample score ``P(G=1 | S, X, T=t)``
* ``outcome_models[t]``: mixture for ``Y | S, X, T=t, G=0`` (conditioning ``[s, x]``)
* ``surrogate_models[t]``: mixture for ``S | X, T=t, G=1`` (conditioning ``x``)

Score models are duck-typed: anything with ``predict(features) -> probs``
works, which is how known (true) nuisance functions are injected.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import CELLS, Dataset
from .mixture import ConditionalMixtureModel, MixtureConfig, fit_mixture
from .scores import LogisticScoreModel, fit_logistic

__all__ = [
    "NuisanceConfig",
    "NuisanceBundle",
    "alpha",
    "fit_bundle",
    "transport",
    "unit_stream",
    "derive_seed",
    "BUNDLE_FORMAT",
]

BUNDLE_FORMAT = "longqte.bundle"
BUNDLE_VERSION = 1


def derive_seed(*keys: int) -> int:
    """Deterministic 63-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def unit_stream(seed: int, t: int, unit: int) -> np.random.Generator:
    """Counter-based stream keyed by (bundle seed, arm, unit index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, t, unit])))


def alpha(g, e, t: int):
    """Density-ratio weight ``g / ((1 - g) * (t e + (1 - t)(1 - e)))``."""
    g = np.asarray(g, dtype=float)
    e = np.asarray(e, dtype=float)
    arm = e if t == 1 else 1.0 - e
    out = g / ((1.0 - g) * arm)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NuisanceConfig:
    clip: float = 0.01
    e_basis: str = "identity"
    g_basis: str = "poly2"
    ridge: float = 1e-4
    outcome_components: int = 3
    surrogate_components: int = 2
    n_restarts: int = 3
    em_tol: float = 1e-8
    em_max_iter: int = 200
    em_pilot_iter: int = 20
    affine_weights: bool = True
    affine_scale: bool = True
    mc_draws: int = 200
    seed: int = 0

    def mixture_config(self, m: int, seed: int) -> MixtureConfig:
        return MixtureConfig(
            m_components=m,
            n_restarts=self.n_restarts,
            tol=self.em_tol,
            max_iter=self.em_max_iter,
            pilot_iter=self.em_pilot_iter,
            affine_weights=self.affine_weights,
            affine_scale=self.affine_scale,
            seed=seed,
        )


@dataclass(frozen=True, eq=False)
class NuisanceBundle:
    e_model: object
    g_models: tuple
    outcome_models: tuple
    surrogate_models: tuple
    mc_draws: int = 200
    rng_seed: int = 0
    training_index: np.ndarray | None = field(default=None, repr=False)

    def e(self, x):
        return self.e_model.predict(x)

    def g(self, t: int, s, x):
        return self.g_models[t].predict(np.hstack([s, x]))

    def alpha(self, t: int, s, x):
        return alpha(self.g(t, s, x), self.e(x), t)

    @staticmethod
    def outcome_cond(s, x):
        return np.hstack([np.asarray(s, dtype=float), np.asarray(x, dtype=float)])

    def surrogate_draws(self, t: int, x, units) -> np.ndarray:
        """Draws of S from ``surrogate_models[t]`` at each row of ``x``.

        Row ``i`` uses the stream ``(rng_seed, t, units[i])``, so a unit's
        draws do not depend on which other units are evaluated.
        Returns (n, R, d_s).
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        model = self.surrogate_models[t]
        r = self.mc_draws
        n = x.shape[0]
        u = np.empty((n, r))
        z = np.empty((n, r, model.response_dim))
        for i, unit in enumerate(units):
            rng = unit_stream(self.rng_seed, t, int(unit))
            u[i] = rng.random(r)
            z[i] = rng.standard_normal((r, model.response_dim))
        return model.sample(x, u, z)

    def with_zeroed_scores(self) -> "NuisanceBundle":
        """Replace every score model by one whose coefficients are all zero."""

        def zero(mdl):
            if isinstance(mdl, LogisticScoreModel):
                return mdl.zeroed()
            raise TypeError("only fitted logistic scores can be zeroed")

        return replace(self, e_model=zero(self.e_model), g_models=tuple(zero(m) for m in self.g_models))

    def with_outcome_shift(self, delta: float) -> "NuisanceBundle":
        """Shift the mean map of both outcome models by ``delta``."""
        return replace(self, outcome_models=tuple(m.shifted(delta) for m in self.outcome_models))

    def to_dict(self, config: NuisanceConfig | None = None) -> dict:
        doc = {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "mc_draws": self.mc_draws,
            "rng_seed": self.rng_seed,
            "e_model": self.e_model.to_dict(),
            "g_models": [m.to_dict() for m in self.g_models],
            "outcome_models": [m.to_dict() for m in self.outcome_models],
            "surrogate_models": [m.to_dict() for m in self.surrogate_models],
        }
        if self.training_index is not None:
            doc["training_index"] = [int(i) for i in self.training_index]
        if config is not None:
            doc["config"] = dict(config.__dict__)
        return doc

    def to_json(self, config: NuisanceConfig | None = None) -> str:
        return json.dumps(self.to_dict(config), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "NuisanceBundle":
        if doc.get("format") != BUNDLE_FORMAT:
            raise ValueError("not a nuisance bundle document")
        if doc.get("version") != BUNDLE_VERSION:
            raise ValueError(f"unsupported bundle version {doc.get('version')!r}")
        idx = doc.get("training_index")
        return cls(
            e_model=LogisticScoreModel.from_dict(doc["e_model"]),
            g_models=tuple(LogisticScoreModel.from_dict(d) for d in doc["g_models"]),
            outcome_models=tuple(ConditionalMixtureModel.from_dict(d) for d in doc["outcome_models"]),
            surrogate_models=tuple(ConditionalMixtureModel.from_dict(d) for d in doc["surrogate_models"]),
            mc_draws=int(doc["mc_draws"]),
            rng_seed=int(doc["rng_seed"]),
            training_index=None if idx is None else np.array(idx, dtype=np.int64),
        )

    @classmethod
    def from_json(cls, text: str) -> "NuisanceBundle":
        return cls.from_dict(json.loads(text))


def _fit_mix(cond, resp, m, cfg: NuisanceConfig, seed: int, label: str):
    n = cond.shape[0]
    if n < 10:
        raise ValueError(f"{label}: only {n} training rows; need at least 10")
    if n < 10 * m:
        m_new = n // 10
        warnings.warn(f"{label}: {n} rows; reducing mixture components from {m} to {m_new}", RuntimeWarning, stacklevel=3)
        m = m_new
    return fit_mixture(cond, resp, m, cfg.mixture_config(m, seed))


def fit_bundle(dataset: Dataset, training_index, config: NuisanceConfig | None = None, seed: int | None = None) -> NuisanceBundle:
    """Fit every nuisance model on ``training_index`` (a fold complement)."""
    cfg = config or NuisanceConfig()
    seed = cfg.seed if seed is None else int(seed)
    idx = np.sort(np.asarray(training_index, dtype=np.int64))
    g, t = dataset.g[idx], dataset.t[idx]
    x, s, y = dataset.x[idx], dataset.s[idx], dataset.y[idx]
    for gg, tt in CELLS:
        if not np.any((g == gg) & (t == tt)):
            raise ValueError(f"training rows contain no units in cell (g={gg}, t={tt})")

    rct = g == 1
    e_model = fit_logistic(x[rct], t[rct], cfg.e_basis, cfg.clip, cfg.ridge)
    g_models, outcome_models, surrogate_models = [], [], []
    for arm in (0, 1):
        on = t == arm
        g_models.append(fit_logistic(np.hstack([s[on], x[on]]), g[on], cfg.g_basis, cfg.clip, cfg.ridge))
        obs = on & ~rct
        outcome_models.append(
            _fit_mix(
                np.hstack([s[obs], x[obs]]),
                y[obs],
                cfg.outcome_components,
                cfg,
                derive_seed(seed, 1, arm),
                f"outcome model (g=0, t={arm})",
            )
        )
        trial = on & rct
        surrogate_models.append(
            _fit_mix(x[trial], s[trial], cfg.surrogate_components, cfg, derive_seed(seed, 2, arm), f"surrogate model (g=1, t={arm})")
        )
    idx.setflags(write=False)
    return NuisanceBundle(
        e_model=e_model,
        g_models=tuple(g_models),
        outcome_models=tuple(outcome_models),
        surrogate_models=tuple(surrogate_models),
        mc_draws=cfg.mc_draws,
        rng_seed=seed,
        training_index=idx,
    )


def transport(outcome_model, surrogate_model, x, q: float, tau: float, r_draws: int, seed: int):
    """Monte Carlo average over ``S ~ surrogate_model(x)`` of the outcome model's
    CDF, expected check loss and density at ``q``.

    Returns ``(m, q2, fbar)``: the transported CDF, transported expected loss
    and transported density.
    """
    if r_draws < 1:
        raise ValueError("r_draws must be >= 1")
    x = np.asarray(x, dtype=float).ravel()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    u = rng.random((1, r_draws))
    z = rng.standard_normal((1, r_draws, surrogate_model.response_dim))
    draws = surrogate_model.sample(x[None, :], u, z)[0]
    cond = np.hstack([draws, np.broadcast_to(x, (r_draws, x.size))])
    m = float(np.mean(outcome_model.cdf(cond, q)))
    q2 = float(np.mean(outcome_model.expected_qloss(cond, q, tau)))
    fbar = float(np.mean(outcome_model.pdf(cond, q)))
    return m, q2, fbar
