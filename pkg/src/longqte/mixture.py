"""Conditional Gaussian mixtures with affine parameter maps.

For a conditioning vector ``c`` the model is

    Y | c  ~  sum_m  w_m(c) N(mu_m(c), diag(sd_m(c)^2))

with ``w = softmax(A c + a)``, ``mu_m = B_m c + b_m`` and
``log sd_m = G_m c + h_m`` (clipped to ``[sd_floor, sd_cap]``; the cap keeps
extrapolated scales finite).  Fitting is a
generalised EM: responsibilities in the E-step, then weighted least squares
for the means and one damped Newton step each for the gating logits and the
log-sd maps.

With a scalar response the model gives closed forms for the conditional CDF,
density and expected check loss, which is what the estimator consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtr

__all__ = [
    "ConditionalMixtureModel",
    "MixtureConfig",
    "fit_mixture",
    "eval_cdf",
    "eval_pdf",
    "eval_expected_qloss",
    "check_loss",
]

_LOG_2PI = np.log(2.0 * np.pi)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def check_loss(u, tau: float):
    """Quantile (check) loss ``u * (tau - 1{u < 0})``."""
    u = np.asarray(u, dtype=float)
    return u * (tau - (u < 0))


def logsumexp(a, axis=-1, keepdims=False):
    mx = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - mx), axis=axis, keepdims=True)) + mx
    return out if keepdims else np.squeeze(out, axis=axis)


def _affine(d: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Apply (M, D, P) affine maps to an (n, P) design, giving (n, M, D)."""
    m, k, p = coef.shape
    return (d @ coef.reshape(m * k, p).T).reshape(d.shape[0], m, k)


def _gram(d: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted Gram matrices: w (n, J) -> (J, P, P) of sum_n w_nj d_n d_n^T."""
    return np.stack([(d * w[:, j, None]).T @ d for j in range(w.shape[1])])


def _design(cond: np.ndarray) -> np.ndarray:
    cond = np.asarray(cond, dtype=float)
    if cond.ndim == 1:
        cond = cond[None, :]
    return np.hstack([np.ones((cond.shape[0], 1)), cond])


@dataclass(frozen=True, eq=False)
class ConditionalMixtureModel:
    """Fitted mixture on the raw conditioning scale.

    Shapes: ``weight_coef`` (M, P), ``mean_coef`` and ``log_sd_coef``
    (M, D, P) with P = 1 + conditioning dimension and column 0 the intercept.
    """

    weight_coef: np.ndarray
    mean_coef: np.ndarray
    log_sd_coef: np.ndarray
    sd_floor: np.ndarray
    loglik: float = float("nan")
    n_iter: int = 0
    sd_cap: np.ndarray | None = None

    @property
    def m_components(self) -> int:
        return int(self.weight_coef.shape[0])

    @property
    def response_dim(self) -> int:
        return int(self.mean_coef.shape[1])

    @property
    def cond_dim(self) -> int:
        return int(self.weight_coef.shape[1] - 1)

    def components(self, cond):
        """Return weights (n, M), means (n, M, D) and sds (n, M, D)."""
        d = _design(cond)
        logits = d @ self.weight_coef.T
        w = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        mu = _affine(d, self.mean_coef)
        log_sd = _affine(d, self.log_sd_coef)
        if self.sd_cap is not None:
            log_sd = np.minimum(log_sd, np.log(self.sd_cap))
        sd = np.maximum(np.exp(log_sd), self.sd_floor)
        return w, mu, sd

    def scalar_components(self, cond):
        if self.response_dim != 1:
            raise ValueError("closed-form evaluations need a scalar response")
        w, mu, sd = self.components(cond)
        return w, mu[..., 0], sd[..., 0]

    def cdf(self, cond, q):
        w, mu, sd = self.scalar_components(cond)
        q = np.asarray(q, dtype=float).reshape(-1, 1)
        return np.clip(np.sum(w * ndtr((q - mu) / sd), axis=1), 0.0, 1.0)

    def pdf(self, cond, q):
        w, mu, sd = self.scalar_components(cond)
        q = np.asarray(q, dtype=float).reshape(-1, 1)
        z = (q - mu) / sd
        return np.sum(w * np.exp(-0.5 * z * z) * _INV_SQRT_2PI / sd, axis=1)

    def expected_qloss(self, cond, q, tau: float):
        """``E[check_loss(Y - q, tau) | cond]`` in closed form."""
        w, mu, sd = self.scalar_components(cond)
        q = np.asarray(q, dtype=float).reshape(-1, 1)
        z = (q - mu) / sd
        hinge = (q - mu) * ndtr(z) + sd * np.exp(-0.5 * z * z) * _INV_SQRT_2PI
        return np.sum(w * (tau * (mu - q) + hinge), axis=1)

    def logpdf(self, cond, response):
        w, mu, sd = self.components(cond)
        r = np.asarray(response, dtype=float).reshape(mu.shape[0], 1, -1)
        z = (r - mu) / sd
        comp = np.sum(-0.5 * _LOG_2PI - np.log(sd) - 0.5 * z * z, axis=2)
        return logsumexp(np.log(w) + comp, axis=1)

    def sample(self, cond, uniforms, normals):
        """Draw responses from given randomness.

        ``uniforms`` (n, R) pick components, ``normals`` (n, R, D) are the
        standard normal innovations.  Returns (n, R, D).
        """
        w, mu, sd = self.components(cond)
        cw = np.cumsum(w, axis=1)[:, None, :-1]
        idx = np.sum(uniforms[..., None] > cw, axis=2)
        n = mu.shape[0]
        rows = np.arange(n)[:, None]
        return mu[rows, idx] + sd[rows, idx] * normals

    def shifted(self, delta) -> "ConditionalMixtureModel":
        """Same model with every component mean moved by ``delta``."""
        mc = self.mean_coef.copy()
        mc[:, :, 0] += np.asarray(delta, dtype=float)
        return replace(self, mean_coef=mc)

    def to_dict(self) -> dict:
        return {
            "kind": "gaussian_mixture",
            "weight_coef": self.weight_coef.tolist(),
            "mean_coef": self.mean_coef.tolist(),
            "log_sd_coef": self.log_sd_coef.tolist(),
            "sd_floor": self.sd_floor.tolist(),
            "loglik": self.loglik,
            "n_iter": self.n_iter,
            "sd_cap": None if self.sd_cap is None else self.sd_cap.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionalMixtureModel":
        return cls(
            np.array(d["weight_coef"], dtype=float),
            np.array(d["mean_coef"], dtype=float),
            np.array(d["log_sd_coef"], dtype=float),
            np.array(d["sd_floor"], dtype=float),
            float(d.get("loglik", float("nan"))),
            int(d.get("n_iter", 0)),
            None if d.get("sd_cap") is None else np.array(d["sd_cap"], dtype=float),
        )

    @classmethod
    def gaussian(cls, mean_coef, log_sd: float = 0.0, sd_floor: float = 1e-9):
        """Single-component model ``N(mean_coef . [1, c], exp(log_sd)^2)``."""
        mean_coef = np.asarray(mean_coef, dtype=float)
        p = mean_coef.shape[-1]
        ls = np.zeros((1, 1, p))
        ls[0, 0, 0] = log_sd
        return cls(np.zeros((1, p)), mean_coef.reshape(1, 1, p), ls, np.array([sd_floor]))


def eval_cdf(model: ConditionalMixtureModel, cond, q: float) -> float:
    return float(model.cdf(np.atleast_2d(cond), q)[0])


def eval_pdf(model: ConditionalMixtureModel, cond, q: float) -> float:
    return float(model.pdf(np.atleast_2d(cond), q)[0])


def eval_expected_qloss(model: ConditionalMixtureModel, cond, q: float, tau: float) -> float:
    return float(model.expected_qloss(np.atleast_2d(cond), q, tau)[0])


@dataclass(frozen=True)
class MixtureConfig:
    m_components: int = 3
    n_restarts: int = 3
    tol: float = 1e-8
    max_iter: int = 200
    pilot_iter: int = 20
    sd_floor_rel: float = 1e-3
    sd_cap_rel: float = 10.0
    affine_weights: bool = True
    affine_scale: bool = True
    ridge: float = 1e-3
    seed: int = 0


class _EM:
    """EM state on standardised conditioning and response."""

    def __init__(self, d: np.ndarray, y: np.ndarray, cfg: MixtureConfig, m: int):
        self.d = d
        self.y = y
        self.cfg = cfg
        self.m = m
        n, p = d.shape
        self.n, self.p = n, p
        self.dim = y.shape[1]
        self.floor = cfg.sd_floor_rel
        self.lam = cfg.ridge * n
        self.slope_mask = np.ones(p)
        self.slope_mask[0] = 0.0

    def evaluate(self, params):
        v, b, g = params
        logits = self.d @ v.T
        logpi = logits - logsumexp(logits, axis=1, keepdims=True)
        mu = _affine(self.d, b)
        sd = np.maximum(np.exp(_affine(self.d, g)), self.floor)
        return logpi, mu, sd

    def e_step(self, params):
        logpi, mu, sd = self.evaluate(params)
        z = (self.y[:, None, :] - mu) / sd
        logdens = np.sum(-0.5 * _LOG_2PI - np.log(sd) - 0.5 * z * z, axis=2)
        joint = logpi + logdens
        lli = logsumexp(joint, axis=1)
        r = np.exp(joint - lli[:, None])
        return float(lli.sum()), r, (logpi, sd)

    def _gating(self, r, v, logpi):
        m, p, d = self.m, self.p, self.d
        if m == 1:
            return v
        if not self.cfg.affine_weights:
            nk = r.sum(axis=0) + 1e-300
            out = np.zeros_like(v)
            out[:, 0] = np.log(nk) - np.log(nk[0])
            return out
        lam = self.lam * self.slope_mask

        def q_obj(vv):
            logits = d @ vv.T
            logpi = logits - logsumexp(logits, axis=1, keepdims=True)
            return float(np.sum(r * logpi)) - 0.5 * float(np.sum(lam * vv * vv))

        a = np.exp(logpi[:, 1:])
        grad = (d.T @ (r[:, 1:] - a)).T - lam * v[1:]
        k = m - 1
        h = np.zeros((k, p, k, p))
        for j in range(k):
            for l in range(j, k):
                wjl = a[:, j] * ((j == l) - a[:, l])
                blk = (d * wjl[:, None]).T @ d
                h[j, :, l, :] = blk
                h[l, :, j, :] = blk.T
        h = h.reshape(k * p, k * p) + np.diag(np.tile(lam, k)) + 1e-8 * np.eye(k * p)
        step = np.linalg.solve(h, grad.ravel()).reshape(k, p)
        base = float(np.sum(r * logpi)) - 0.5 * float(np.sum(lam * v * v))
        lr = 1.0
        for _ in range(20):
            cand = v.copy()
            cand[1:] += lr * step
            if q_obj(cand) >= base:
                return cand
            lr *= 0.5
        return v

    def _means(self, r, sd):
        d, y = self.d, self.y
        m, k, p = self.m, self.dim, self.p
        w = (r[:, :, None] / (sd * sd)).reshape(self.n, m * k)
        xtwx = _gram(d, w) + 1e-10 * self.n * np.eye(p)
        xtwy = (w[:, :, None] * d[:, None, :] * np.tile(y, (1, m))[:, :, None]).sum(axis=0)
        return np.linalg.solve(xtwx, xtwy[..., None])[..., 0].reshape(m, k, p)

    def _scales(self, r, b, g):
        d, y = self.d, self.y
        mu = _affine(d, b)
        # the floor term keeps the optimum finite when residuals vanish
        e2 = (y[:, None, :] - mu) ** 2 + self.floor**2
        rr = r[:, :, None]
        if not self.cfg.affine_scale:
            var = np.sum(rr * e2, axis=0) / (np.sum(r, axis=0)[:, None] + 1e-300)
            out = np.zeros_like(g)
            out[:, :, 0] = 0.5 * np.log(np.maximum(var, self.floor**2))
            return out
        lam = self.lam * self.slope_mask

        def f_obj(gg):
            vv = _affine(d, gg)
            return np.sum(rr * (-vv - 0.5 * e2 * np.exp(-2 * vv)), axis=0) - 0.5 * np.sum(lam * gg * gg, axis=2)

        m, k, p = g.shape
        v = _affine(d, g)
        ex = e2 * np.exp(-2 * v)
        grad = ((rr * (ex - 1.0)).reshape(self.n, m * k).T @ d).reshape(m, k, p) - lam * g
        hw = (2.0 * rr * ex).reshape(self.n, m * k)
        h = _gram(d, hw).reshape(m, k, p, p) + np.diag(lam) + 1e-8 * self.n * np.eye(p)
        step = np.linalg.solve(h, grad[..., None])[..., 0]
        base = f_obj(g)
        out = g.copy()
        lr = np.ones(base.shape)
        pending = np.ones(base.shape, dtype=bool)
        for _ in range(20):
            cand = g + lr[..., None] * step
            val = f_obj(cand)
            ok = pending & (val >= base)
            out[ok] = cand[ok]
            pending &= ~ok
            if not pending.any():
                break
            lr = np.where(pending, 0.5 * lr, lr)
        return out

    def m_step(self, r, params, cache):
        v, b, g = params
        logpi, sd = cache
        v = self._gating(r, v, logpi)
        b = self._means(r, sd)
        g = self._scales(r, b, g)
        return v, b, g

    def initial(self, r):
        m, dim, p = self.m, self.dim, self.p
        v = np.zeros((m, p))
        b = np.zeros((m, dim, p))
        g = np.zeros((m, dim, p))
        nk = r.sum(axis=0) + 1e-12
        v[:, 0] = np.log(nk) - np.log(nk[0])
        b = self._means(r, np.ones((self.n, m, dim)))
        mu = _affine(self.d, b)
        var = np.sum(r[:, :, None] * (self.y[:, None, :] - mu) ** 2, axis=0) / nk[:, None]
        g[:, :, 0] = 0.5 * np.log(np.maximum(var, self.floor**2))
        return v, b, g

    def run(self, params, n_iter, ll_prev=None):
        ll_old = -np.inf if ll_prev is None else ll_prev
        done = False
        it = 0
        ll, r, cache = self.e_step(params)
        for it in range(n_iter):
            if np.isfinite(ll_old) and abs(ll - ll_old) <= self.cfg.tol * abs(ll_old):
                done = True
                break
            params = self.m_step(r, params, cache)
            ll_old = ll
            ll, r, cache = self.e_step(params)
        return params, ll, it, done


def fit_mixture(conditioning, response, m_components: int | None = None, config: MixtureConfig | None = None):
    """Fit a conditional Gaussian mixture by multi-restart generalised EM.

    Every restart runs ``pilot_iter`` iterations; the best by log-likelihood
    then continues to convergence (``tol`` relative change, ``max_iter`` cap).
    Restart 0 splits OLS residuals by quantile; later restarts seed soft
    assignments around randomly chosen residuals (seeded from ``config.seed``).
    """
    cfg = config or MixtureConfig()
    m = int(m_components if m_components is not None else cfg.m_components)
    if m < 1:
        raise ValueError("m_components must be >= 1")
    cond = np.asarray(conditioning, dtype=float)
    if cond.ndim == 1:
        cond = cond[:, None]
    y = np.asarray(response, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n = cond.shape[0]
    if y.shape[0] != n:
        raise ValueError("conditioning and response lengths differ")
    if n < 10 * m:
        raise ValueError(f"need at least {10 * m} rows for {m} components, got {n}")
    if not (np.isfinite(cond).all() and np.isfinite(y).all()):
        raise ValueError("inputs must be finite")

    cm = cond.mean(axis=0)
    cs = cond.std(axis=0)
    cs[cs == 0] = 1.0
    ym = y.mean(axis=0)
    ys = y.std(axis=0)
    ys[ys == 0] = 1.0
    d = np.hstack([np.ones((n, 1)), (cond - cm) / cs])
    yz = (y - ym) / ys
    em = _EM(d, yz, cfg, m)

    beta, *_ = np.linalg.lstsq(d, yz, rcond=None)
    resid = yz - d @ beta
    proj = resid.sum(axis=1)
    starts = []
    order = np.argsort(proj, kind="stable")
    r0 = np.zeros((n, m))
    r0[order, (np.arange(n) * m) // n] = 1.0
    starts.append(r0)
    h2 = 0.25 * max(float(np.mean(np.sum(resid**2, axis=1))), 1e-12)
    for j in range(1, cfg.n_restarts if m > 1 else 1):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, j])))
        centers = resid[rng.choice(n, size=m, replace=False)]
        dist = np.sum((resid[:, None, :] - centers[None]) ** 2, axis=2)
        logits = -dist / (2 * h2)
        rj = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        starts.append(rj)

    best = None
    for rj in starts:
        params, ll, it, done = em.run(em.initial(rj), cfg.pilot_iter)
        if best is None or ll > best[1]:
            best = (params, ll, it, done)
    params, ll, it, done = best
    total = it
    if not done and cfg.max_iter > cfg.pilot_iter:
        params, ll, it2, done = em.run(params, cfg.max_iter - cfg.pilot_iter)
        total += it2

    v, b, g = params
    # back to the raw scale: c_std = (c - cm) / cs, y = ym + ys * y_std
    w_slope = v[:, 1:] / cs
    w_coef = np.hstack([(v[:, 0] - w_slope @ cm)[:, None], w_slope])
    m_slope = b[:, :, 1:] / cs * ys[None, :, None]
    m_int = ym[None, :] + ys[None, :] * b[:, :, 0] - m_slope @ cm
    mean_coef = np.concatenate([m_int[..., None], m_slope], axis=2)
    g_slope = g[:, :, 1:] / cs
    g_int = np.log(ys)[None, :] + g[:, :, 0] - g_slope @ cm
    log_sd_coef = np.concatenate([g_int[..., None], g_slope], axis=2)
    ll_raw = ll - n * float(np.sum(np.log(ys)))
    return ConditionalMixtureModel(w_coef, mean_coef, log_sd_coef, cfg.sd_floor_rel * ys, ll_raw, total, sd_cap=cfg.sd_cap_rel * ys)
