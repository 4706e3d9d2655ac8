"""Smallest root above one of ``P(x) - log(x)``.

Both delta equations used by the estimators have this form with ``P`` a
polynomial with non-negative coefficients and no constant term:

* ODE:  ``P(x) = sum_m C_m x**m`` with ``C_m = (G*phi)**m * I_{m+1}``
* PDE:  ``P(x) = c x**2``

``s(x) = P(x) - log(x)`` is convex on ``(0, inf)`` so it has at most two
roots there.  The minimiser ``x*`` solves ``x P'(x) = 1`` (the left-hand side
is increasing), a root above one exists iff ``s(x*) <= 0``, and the smallest
one is the unique zero of ``s`` on ``(1, x*]``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import NoDelta

# s(x*) within this of zero counts as tangency
_TANGENCY_TOL = 1e-13


def _poly(coeffs, x):
    # coeffs[m-1] multiplies x**m
    return sum(c * x ** (m + 1) for m, c in enumerate(coeffs))


def _x_dpoly(coeffs, x):
    return sum((m + 1) * c * x ** (m + 1) for m, c in enumerate(coeffs))


def delta_function(coeffs: Sequence[float], x: float) -> float:
    """Evaluate ``sum_m coeffs[m-1] x**m - log(x)``."""
    return _poly(coeffs, x) - math.log(x)


def smallest_delta(coeffs: Sequence[float]) -> float:
    """Return the smallest root ``> 1`` of ``sum_m coeffs[m-1] x**m - log x``.

    Newton's method started at ``x = 1`` increases monotonically towards the
    smallest root because ``s`` is convex and decreasing there; passing the
    minimiser before ``s`` changes sign proves that no root exists.  Slow
    (tangential) cases fall back to a bracketed solve.

    Parameters
    ----------
    coeffs : sequence of float
        Non-negative coefficients of ``x, x**2, ...``.

    Returns
    -------
    float
        The root.  When every coefficient is zero the infimum ``1.0`` of
        admissible roots is returned.

    Raises
    ------
    NoDelta
        If no root exists in ``(1, inf)``.
    """
    coeffs = [float(c) for c in coeffs]
    for c in coeffs:
        if not (c >= 0.0 and c < math.inf):
            raise NoDelta(f"invalid delta-equation coefficients {coeffs}")
    if not any(coeffs):
        return 1.0
    if _x_dpoly(coeffs, 1.0) >= 1.0:
        # s increasing on (1, inf) and s(1) > 0
        raise NoDelta("delta equation has no root above 1")

    x = 1.0
    for _ in range(60):
        s = _poly(coeffs, x) - math.log(x)
        ds = (_x_dpoly(coeffs, x) - 1.0) / x
        if ds >= 0.0:
            if s <= _TANGENCY_TOL:
                return x
            raise NoDelta("delta equation minimum is positive")
        if s <= 0.0:
            return x
        dx = -s / ds
        x_new = x + dx
        if x_new == x or dx <= 1e-16 * x:
            return x_new
        x = x_new
    return _bracketed_delta(coeffs)


def _bracketed_delta(coeffs):
    hi = 2.0
    while _x_dpoly(coeffs, hi) < 1.0:
        hi *= 2.0
        if hi > 1e300:
            raise NoDelta("could not bracket the minimiser")
    lo = hi / 2.0 if hi > 2.0 else 1.0
    x_star = brentq(lambda x: _x_dpoly(coeffs, x) - 1.0, lo, hi,
                    xtol=1e-15, rtol=4 * np.finfo(float).eps)
    s_star = delta_function(coeffs, x_star)
    if s_star > _TANGENCY_TOL:
        raise NoDelta(f"delta equation minimum {s_star:.3e} > 0")
    if s_star >= 0.0:
        return x_star
    return brentq(lambda x: delta_function(coeffs, x), 1.0, x_star,
                  xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=500)


def lemma_sufficient(coeffs: Sequence[float]) -> bool:
    """Sufficient condition for a root above one: ``sum_j j C_j e**j <= 1``.

    ``coeffs[j-1]`` is ``C_j``.
    """
    return sum((j + 1) * c * math.e ** (j + 1) for j, c in enumerate(coeffs)) <= 1.0


def quadratic_delta(c: float) -> float:
    """Smallest root ``> 1`` of ``c x**2 - log x`` (requires ``c <= 1/(2e)``)."""
    return smallest_delta([0.0, c])
