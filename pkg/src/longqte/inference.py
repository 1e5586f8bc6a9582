"""Influence-function variance and Wald intervals for the QTE."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

__all__ = ["EifVector", "ConfidenceInterval", "estimate_J", "eif_values", "variance", "confidence_interval"]


@dataclass(frozen=True, eq=False)
class EifVector:
    phi: np.ndarray

    @property
    def n(self) -> int:
        return int(self.phi.shape[0])

    @property
    def mean(self) -> float:
        return float(np.mean(self.phi))


@dataclass(frozen=True)
class ConfidenceInterval:
    level: float
    low: float
    high: float
    ese: float


def estimate_J(ctx, t: int, q_hat: float, j_floor: float = 1e-4) -> float:
    """Density bridge: mean over experimental units of the transported density at ``q_hat``."""
    fbar = ctx.fbar_units(t, q_hat)
    j = float(np.mean(fbar))
    if not j >= j_floor:
        warnings.warn(f"density bridge J_{t}={j:.3g} below floor; using {j_floor}", RuntimeWarning, stacklevel=2)
        j = j_floor
    return j


def eif_values(ctx, q1_hat: float, q0_hat: float, j1_hat: float, j0_hat: float, tau: float) -> EifVector:
    """``phi_i = psi_1(W_i; q1) / J_1 - psi_0(W_i; q0) / J_0``, each unit with its own fold's nuisances."""
    phi = ctx.psi_units(1, q1_hat, tau) / j1_hat - ctx.psi_units(0, q0_hat, tau) / j0_hat
    return EifVector(phi)


def variance(eif: EifVector) -> float:
    """Centred second moment with divisor N."""
    phi = eif.phi
    return float(np.mean((phi - phi.mean()) ** 2))


def confidence_interval(delta_hat: float, v_hat: float, n: int, alpha: float = 0.05) -> ConfidenceInterval:
    if v_hat < 0 or n < 1 or not 0 < alpha <= 1:
        raise ValueError("need v_hat >= 0, n >= 1 and alpha in (0, 1]")
    ese = math.sqrt(v_hat / n)
    z = float(ndtri(1.0 - alpha / 2.0))
    half = z * ese
    return ConfidenceInterval(1.0 - alpha, delta_hat - half, delta_hat + half, ese)
