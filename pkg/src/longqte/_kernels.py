"""Compiled reductions over weighted Gaussian and point-mass atoms.

For an atom ``Y ~ N(mu, sd^2)`` the hinge ``E[(q - Y)^+]`` equals
``sd * (z Phi(z) + phi(z))`` with ``z = (q - mu) / sd``.  Beyond ``CUT``
standard deviations it is ``0`` (below) or ``q - mu`` (above) to double
precision, which lets the grid kernel evaluate each atom exactly only on the
grid points inside its window and fold the rest into cumulative sums.
"""

import math

import numpy as np
from numba import njit

CUT = 8.5
_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def hinge_grid(q0, dq, ng, c, mu, sd, d, y):
    """``sum_a c_a E[(q_k - Y_a)^+] + sum_j d_j (q_k - y_j)^+`` on ``q_k = q0 + k dq``."""
    out = np.zeros(ng)
    lin_a = np.zeros(ng + 1)
    lin_b = np.zeros(ng + 1)
    for a in range(c.shape[0]):
        m = mu[a]
        s = sd[a]
        lo = (m - CUT * s - q0) / dq
        hi = (m + CUT * s - q0) / dq
        if hi < 0.0:
            start = 0
        elif hi >= ng:
            start = ng
        else:
            start = int(math.floor(hi)) + 1
        if lo <= 0.0:
            first = 0
        elif lo >= ng:
            first = ng
        else:
            first = int(math.ceil(lo))
        ca = c[a]
        for k in range(first, start):
            z = (q0 + k * dq - m) / s
            out[k] += ca * s * (z * 0.5 * math.erfc(-z * _SQRT1_2) + _INV_SQRT_2PI * math.exp(-0.5 * z * z))
        lin_a[start] += ca
        lin_b[start] += ca * m
    for j in range(d.shape[0]):
        pos = (y[j] - q0) / dq
        if pos < 0.0:
            start = 0
        elif pos >= ng:
            start = ng
        else:
            start = int(math.floor(pos)) + 1
        lin_a[start] += d[j]
        lin_b[start] += d[j] * y[j]
    acc_a = 0.0
    acc_b = 0.0
    for k in range(ng):
        acc_a += lin_a[k]
        acc_b += lin_b[k]
        out[k] += (q0 + k * dq) * acc_a - acc_b
    return out


@njit(cache=True)
def hinge_point(q, c, mu, sd, d, y):
    total = 0.0
    for a in range(c.shape[0]):
        z = (q - mu[a]) / sd[a]
        total += c[a] * sd[a] * (z * 0.5 * math.erfc(-z * _SQRT1_2) + _INV_SQRT_2PI * math.exp(-0.5 * z * z))
    for j in range(d.shape[0]):
        if q > y[j]:
            total += d[j] * (q - y[j])
    return total


@njit(cache=True)
def cdf_point(q, c, mu, sd, d, y):
    """``sum_a c_a Phi((q - mu_a) / sd_a) + sum_j d_j 1{y_j <= q}``."""
    total = 0.0
    for a in range(c.shape[0]):
        total += c[a] * 0.5 * math.erfc(-(q - mu[a]) / sd[a] * _SQRT1_2)
    for j in range(d.shape[0]):
        if y[j] <= q:
            total += d[j]
    return total


@njit(cache=True)
def density_point(q, c, mu, sd):
    total = 0.0
    for a in range(c.shape[0]):
        z = (q - mu[a]) / sd[a]
        total += c[a] * _INV_SQRT_2PI * math.exp(-0.5 * z * z) / sd[a]
    return total
