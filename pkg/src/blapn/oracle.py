"""Closed-form ground truth for the NFIR feedback benchmark.

The loop is ``y(t) = u(t-1) + u(t-2) w(t)^2`` with ``u(t) = r(t) - alpha y(t)``
and ``w`` white Gaussian with std ``sigma_w``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NfirParams:
    alpha: float = 0.3
    sigma_w: float = 0.75
    sigma_r: float = 1.0
    sigma_u: float = 0.0
    T_s: float = 1.0

    def __post_init__(self):
        if self.sigma_w < 0:
            raise ValueError("sigma_w must be >= 0")
        if self.sigma_u < 0:
            raise ValueError("sigma_u must be >= 0")

    @property
    def stable(self) -> bool:
        return nfir_stability_ok(self.alpha, self.sigma_w)


def nfir_bla_true(p: NfirParams, omega):
    """``exp(-j w T) + sigma_w^2 exp(-2 j w T)``."""
    wt = np.asarray(omega) * p.T_s
    return np.exp(-1j * wt) + p.sigma_w**2 * np.exp(-2j * wt)


def nfir_bla_var_true(p: NfirParams, omega):
    """First-order variance ``|1 + alpha G|^2 * 2 sigma_u^2 sigma_w^4 / sigma_r^2``.

    Per unit degree of freedom: divide by the estimator's dof before comparing
    against averaged estimates.
    """
    if p.sigma_r <= 0:
        raise ValueError("sigma_r must be > 0")
    G = nfir_bla_true(p, omega)
    return np.abs(1 + p.alpha * G) ** 2 * 2 * p.sigma_u**2 * p.sigma_w**4 / p.sigma_r**2


def nfir_ry_ru_true(p: NfirParams, z):
    """Transfers from ``r`` to ``E{y|r}`` and to ``E{u|r}`` evaluated at ``z``."""
    z = np.asarray(z, dtype=complex)
    if not np.allclose(np.abs(z), 1.0, atol=1e-9):
        raise ValueError("z must lie on the unit circle")
    s2 = p.sigma_w**2
    den = 1 + p.alpha / z + p.alpha * s2 / z**2
    if np.any(np.abs(den) < 1e-14):
        raise ZeroDivisionError("denominator vanishes on the unit circle (stability boundary)")
    g_ry = (1 / z + s2 / z**2) / den
    g_ru = 1 / den
    return g_ry, g_ru


def nfir_stability_ok(alpha, sigma_w) -> bool:
    """``0 < alpha < min(4 sigma_w^2, sigma_w^-2)``, or ``|alpha| < 1`` when ``sigma_w = 0``."""
    if sigma_w == 0:
        return abs(alpha) < 1
    s2 = sigma_w**2
    return bool(0 < alpha < min(4 * s2, 1 / s2))


def nfir_poles(alpha, sigma_w) -> np.ndarray:
    """Roots of ``z^2 + alpha z + alpha sigma_w^2``."""
    if sigma_w == 0:
        return np.array([-float(alpha)])
    return np.roots([1.0, alpha, alpha * sigma_w**2])


def poles_complex_and_inside(alpha, sigma_w) -> bool:
    """Root-finding counterpart of :func:`nfir_stability_ok`.

    The bound assumes a complex-conjugate pole pair (for ``sigma_w > 0``);
    configurations with two real poles inside the circle are not covered by it.
    """
    z = nfir_poles(alpha, sigma_w)
    if z.size == 1:
        return bool(abs(z[0]) < 1)
    complex_pair = abs(z[0].imag) > 0 and np.isclose(z[0], np.conj(z[1]))
    return bool(complex_pair and np.all(np.abs(z) < 1))


def nfir_yp_var_true(sigma_u, sigma_w):
    """``var(y_p) = 2 sigma_u^2 sigma_w^4`` with ``y_p = u(t-2) (w^2 - sigma_w^2)``."""
    return 2.0 * sigma_u**2 * sigma_w**4


def nfir_yp_series(u, w, sigma_w):
    """Time-domain process-noise output ``u(t-2) (w(t)^2 - sigma_w^2)`` (zero before t=2)."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    out = np.zeros(np.broadcast_shapes(u.shape, w.shape))
    out[..., 2:] = u[..., :-2] * (w[..., 2:] ** 2 - sigma_w**2)
    return out
