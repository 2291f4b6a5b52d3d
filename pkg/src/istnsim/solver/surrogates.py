"""Smoothing and bound functions of the successive convex approximation.

f_ap smooths the l0-norm indicator; f_ap_lin is its tangent over-estimator,
f_exp_lin under-estimates exp, f_sqrt_lin over-estimates sqrt.  Each bound is
tight exactly at the expansion point.
"""

import numpy as np


def f_ap(x, eps: float):
    """Concave l0 surrogate 1 - exp(-x/eps), x >= 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("f_ap requires x >= 0")
    return 1.0 - np.exp(-x / eps)


def f_ap_lin(x, x0, eps: float):
    """Tangent of f_ap at x0: (1/eps) e^{-x0/eps} (x - x0 - eps) + 1."""
    x = np.asarray(x, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    return np.exp(-x0 / eps) / eps * (x - x0 - eps) + 1.0


def f_ap_lin_coeffs(x0, eps: float):
    """(slope a, intercept b) with f_ap_lin(x) = a*x + b."""
    x0 = np.asarray(x0, dtype=float)
    a = np.exp(-x0 / eps) / eps
    b = 1.0 - a * (x0 + eps)
    return a, b


def f_exp_lin(u, u0):
    """Tangent under-estimator of exp at u0: e^{u0} (u - u0 + 1)."""
    u = np.asarray(u, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    return np.exp(u0) * (u - u0 + 1.0)


def f_sqrt_lin(x, x0):
    """Tangent over-estimator of sqrt at x0 > 0: 0.5 x / sqrt(x0) + 0.5 sqrt(x0)."""
    x = np.asarray(x, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if np.any(x0 <= 0):
        raise ValueError("f_sqrt_lin requires a positive expansion point")
    return 0.5 * x / np.sqrt(x0) + 0.5 * np.sqrt(x0)
