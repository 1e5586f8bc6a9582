"""Ridge-penalised logistic regression fitted by IRLS, with clipped predictions.

Used for the trial propensity ``e(X)`` and the sample-membership scores
``g_t(S, X)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = ["LogisticScoreModel", "ConstantScore", "fit_logistic", "expand"]

BASES = ("intercept", "identity", "poly2")


def expand(features: np.ndarray, basis: str) -> np.ndarray:
    """Basis expansion without intercept. ``poly2`` appends all products x_i x_j, i <= j."""
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    if basis == "intercept":
        return np.zeros((features.shape[0], 0))
    if basis == "identity":
        return features
    if basis == "poly2":
        d = features.shape[1]
        cols = [features]
        cols += [features[:, i : i + 1] * features[:, i:] for i in range(d)]
        return np.hstack(cols)
    raise ValueError(f"unknown basis {basis!r}; expected one of {BASES}")


@dataclass(frozen=True)
class LogisticScoreModel:
    """``clip(expit(b0 + b . phi(x)), eps, 1 - eps)`` on the raw feature scale."""

    coefficients: np.ndarray
    feature_map: str = "identity"
    clip: float = 0.01
    converged: bool = True
    n_iter: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip < 0.5:
            raise ValueError(f"clip must lie in (0, 0.5), got {self.clip}")

    def linear_predictor(self, features: np.ndarray) -> np.ndarray:
        phi = expand(features, self.feature_map)
        return self.coefficients[0] + phi @ self.coefficients[1:]

    def predict_raw(self, features: np.ndarray) -> np.ndarray:
        return expit(self.linear_predictor(features))

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.clip(self.predict_raw(features), self.clip, 1.0 - self.clip)

    def zeroed(self) -> "LogisticScoreModel":
        """Same model with every coefficient set to zero (predicts 0.5)."""
        return LogisticScoreModel(np.zeros_like(self.coefficients), self.feature_map, self.clip)

    def to_dict(self) -> dict:
        return {
            "kind": "logistic",
            "coefficients": [float(c) for c in self.coefficients],
            "feature_map": self.feature_map,
            "clip": self.clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticScoreModel":
        return cls(np.array(d["coefficients"], dtype=float), d["feature_map"], float(d["clip"]))


@dataclass(frozen=True)
class ConstantScore:
    """Score that ignores its features; handy for known trial designs."""

    p: float = 0.5

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.full(np.asarray(features).shape[0], self.p)


def fit_logistic(
    features: np.ndarray,
    labels: np.ndarray,
    basis: str = "identity",
    clip: float = 0.01,
    ridge: float = 1e-4,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> LogisticScoreModel:
    """Maximise ``mean log-lik - ridge/2 * |slopes|^2`` over standardised features.

    The intercept is unpenalised.  Iterates Newton (IRLS) steps with step
    halving until the gradient norm falls below ``tol`` or ``max_iter`` is hit.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float).ravel()
    if not np.isfinite(features).all():
        raise ValueError("features must be finite")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    if labels.min() == labels.max():
        raise ValueError("labels need at least one example of each class")
    phi = expand(features, basis)
    n, p = phi.shape
    if n < p + 1:
        raise ValueError(f"need at least {p + 1} rows for {p} features, got {n}")

    center = phi.mean(axis=0)
    scale = phi.std(axis=0)
    scale[scale == 0] = 1.0
    z = np.hstack([np.ones((n, 1)), (phi - center) / scale])
    pen = np.full(p + 1, ridge)
    pen[0] = 0.0

    def objective(b):
        eta = z @ b
        ll = np.mean(labels * eta - np.logaddexp(0.0, eta))
        return ll - 0.5 * np.sum(pen * b * b)

    beta = np.zeros(p + 1)
    ybar = labels.mean()
    beta[0] = np.log(ybar / (1 - ybar))
    obj = objective(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(z @ beta)
        grad = z.T @ (labels - mu) / n - pen * beta
        if np.linalg.norm(grad) <= tol:
            converged = True
            break
        w = mu * (1 - mu)
        hess = (z * w[:, None]).T @ z / n + np.diag(pen) + 1e-12 * np.eye(p + 1)
        step = np.linalg.solve(hess, grad)
        lr = 1.0
        for _ in range(30):
            cand = beta + lr * step
            cobj = objective(cand)
            if cobj >= obj - 1e-15:
                break
            lr *= 0.5
        beta, obj = cand, cobj
    else:
        mu = expit(z @ beta)
        grad = z.T @ (labels - mu) / n - pen * beta
        converged = bool(np.linalg.norm(grad) <= tol)
    if not converged:
        warnings.warn(f"logistic IRLS stopped after {max_iter} iterations", RuntimeWarning, stacklevel=2)

    slopes = beta[1:] / scale
    intercept = beta[0] - np.sum(slopes * center)
    return LogisticScoreModel(np.concatenate([[intercept], slopes]), basis, clip, converged, it)
