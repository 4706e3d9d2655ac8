"""Compiled scalar kernels behind :mod:`blowup.ode`.

Polynomials are float64 arrays of coefficients, lowest degree first.
Slab integrands are polynomials in ``theta = (t - t^{k-1}) / tau`` on
``[0, 1]``.
"""

import math

import numpy as np
from numba import njit

EXPLICIT, IMPLICIT, IMPROVED = 0, 1, 2

OK, NO_ROOT, OVERFLOW, NO_DELTA = 0, 1, 2, 3

TANGENCY_TOL = 1e-13


@njit(cache=True)
def horner(c, x):
    v = 0.0
    for i in range(c.size - 1, -1, -1):
        v = v * x + c[i]
    return v


@njit(cache=True)
def deriv(c):
    if c.size == 1:
        return np.zeros(1)
    out = np.empty(c.size - 1)
    for i in range(1, c.size):
        out[i - 1] = i * c[i]
    return out


@njit(cache=True)
def compose_linear(c, u0, du):
    """Coefficients in theta of ``sum_j c_j (u0 + du theta)**j``."""
    n = c.size
    out = np.zeros(n)
    # Horner in polynomial arithmetic
    out[0] = c[n - 1]
    deg = 0
    for j in range(n - 2, -1, -1):
        for i in range(deg + 1, 0, -1):
            out[i] = out[i] * u0 + out[i - 1] * du
        out[0] = out[0] * u0 + c[j]
        deg += 1
    return out


@njit(cache=True)
def antideriv(c, lo, hi):
    s = 0.0
    plo = lo
    phi_ = hi
    for i in range(c.size):
        s += c[i] * (phi_ - plo) / (i + 1)
        plo *= lo
        phi_ *= hi
    return s


@njit(cache=True)
def _bisect_root(c, lo, hi, flo):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = horner(c, mid)
        if (fm > 0.0) == (flo > 0.0):
            lo = mid
            flo = fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


@njit(cache=True)
def abs_int_01(c, monotone):
    """Exact ``int_0^1 |c(theta)| dtheta`` split at sign changes."""
    if monotone:
        f0 = horner(c, 0.0)
        f1 = horner(c, 1.0)
        if f0 * f1 >= 0.0:
            return abs(antideriv(c, 0.0, 1.0))
        r = _bisect_root(c, 0.0, 1.0, f0)
        return abs(antideriv(c, 0.0, r)) + abs(antideriv(c, r, 1.0))
    # general case: isolate sign changes via the roots of c
    n = c.size
    while n > 1 and c[n - 1] == 0.0:
        n -= 1
    cuts = [0.0, 1.0]
    if n > 1:
        rev = np.empty(n, dtype=np.complex128)
        for i in range(n):
            rev[i] = c[n - 1 - i]
        rts = np.roots(rev)
        for r in rts:
            if abs(r.imag) <= 1e-12 * max(1.0, abs(r.real)) and 0.0 < r.real < 1.0:
                cuts.append(r.real)
    cuts.sort()
    total = 0.0
    for i in range(len(cuts) - 1):
        total += abs(antideriv(c, cuts[i], cuts[i + 1]))
    return total


@njit(cache=True)
def increment(scheme, f, u_prev, u_next, tau):
    if scheme == EXPLICIT:
        return horner(f, u_prev)
    if scheme == IMPLICIT:
        return horner(f, u_next)
    fp = horner(f, u_prev)
    return 0.5 * (fp + horner(f, u_prev + tau * fp))


@njit(cache=True)
def implicit_root(f, u_prev, tau):
    """Real root of ``tau f(U) - U + u_prev`` closest to ``u_prev``.

    Returns ``(U, status)``.
    """
    g = tau * f.copy()
    g[0] += u_prev
    g[1] -= 1.0
    n = g.size
    while n > 1 and g[n - 1] == 0.0:
        n -= 1
    g = g[:n]
    dg = deriv(g)
    if n == 3:
        # quadratic: stable closed form
        a, b, c0 = g[2], g[1], g[0]
        disc = b * b - 4.0 * a * c0
        if disc < 0.0:
            return u_prev, NO_ROOT
        sq = math.sqrt(disc)
        q = -0.5 * (b + math.copysign(sq, b))
        r1 = q / a
        r2 = c0 / q if q != 0.0 else r1
        x = r1 if abs(r1 - u_prev) <= abs(r2 - u_prev) else r2
    else:
        rev = np.empty(n, dtype=np.complex128)
        for i in range(n):
            rev[i] = g[n - 1 - i]
        rts = np.roots(rev)
        best = np.inf
        x = u_prev
        found = False
        for r in rts:
            if abs(r.imag) <= 1e-9 * max(1.0, abs(r.real)):
                d = abs(r.real - u_prev)
                if d < best:
                    best = d
                    x = r.real
                    found = True
        if not found:
            return u_prev, NO_ROOT
    for _ in range(50):
        d = horner(dg, x)
        if d == 0.0:
            break
        dx = horner(g, x) / d
        x -= dx
        if abs(dx) <= 1e-14 * max(1.0, abs(x)):
            break
    if not math.isfinite(x):
        return x, OVERFLOW
    return x, OK


@njit(cache=True)
def step(scheme, f, u_prev, tau):
    if not math.isfinite(u_prev):
        return u_prev, OVERFLOW
    if scheme == EXPLICIT:
        u = u_prev + tau * horner(f, u_prev)
    elif scheme == IMPLICIT:
        u, status = implicit_root(f, u_prev, tau)
        if status != OK:
            return u, status
    else:
        fp = horner(f, u_prev)
        u = u_prev + 0.5 * tau * (fp + horner(f, u_prev + tau * fp))
    if not math.isfinite(u):
        return u, OVERFLOW
    return u, OK


@njit(cache=True)
def is_monotone(u_prev, u_next):
    # alpha_j >= 0 for j >= 1 makes every derivative of f nondecreasing on
    # u >= 0, hence monotone in theta along the linear interpolant
    return u_prev >= 0.0 and u_next >= 0.0


@njit(cache=True)
def residual_integral(scheme, f, u_prev, u_next, tau):
    F = increment(scheme, f, u_prev, u_next, tau)
    eta = compose_linear(f, u_prev, u_next - u_prev)
    eta[0] -= F
    return tau * abs_int_01(eta, is_monotone(u_prev, u_next))


@njit(cache=True)
def derivative_integrals(f, u_prev, u_next, tau):
    """``I_j = int |f^{(j)}(U)| / j! ds`` for ``j = 1..p`` (index ``j-1``)."""
    p = f.size - 1
    out = np.empty(p)
    mono = is_monotone(u_prev, u_next)
    d = f.copy()
    fact = 1.0
    for j in range(1, p + 1):
        d = deriv(d)
        fact *= j
        c = compose_linear(d, u_prev, u_next - u_prev)
        out[j - 1] = tau * abs_int_01(c, mono) / fact
    return out


@njit(cache=True)
def poly_x(coeffs, x):
    # sum_m coeffs[m-1] x**m
    s = 0.0
    xp = x
    for m in range(coeffs.size):
        s += coeffs[m] * xp
        xp *= x
    return s


@njit(cache=True)
def x_dpoly_x(coeffs, x):
    s = 0.0
    xp = x
    for m in range(coeffs.size):
        s += (m + 1) * coeffs[m] * xp
        xp *= x
    return s


@njit(cache=True)
def smallest_delta(coeffs):
    """Smallest root > 1 of ``sum_m coeffs[m-1] x**m - log x``.

    Returns ``(delta, status)``; see :func:`blowup.delta.smallest_delta`.
    """
    allzero = True
    for c in coeffs:
        if not (c >= 0.0 and c < np.inf):
            return np.nan, NO_DELTA
        if c != 0.0:
            allzero = False
    if allzero:
        return 1.0, OK
    if x_dpoly_x(coeffs, 1.0) >= 1.0:
        return np.nan, NO_DELTA
    x = 1.0
    for _ in range(60):
        s = poly_x(coeffs, x) - math.log(x)
        ds = (x_dpoly_x(coeffs, x) - 1.0) / x
        if ds >= 0.0:
            if s <= TANGENCY_TOL:
                return x, OK
            return np.nan, NO_DELTA
        if s <= 0.0:
            return x, OK
        dx = -s / ds
        xn = x + dx
        if xn == x or dx <= 1e-16 * x:
            return xn, OK
        x = xn
    # slow convergence near tangency: bisection on the convex function
    hi = 2.0
    while x_dpoly_x(coeffs, hi) < 1.0:
        hi *= 2.0
        if hi > 1e300:
            return np.nan, NO_DELTA
    lo = 1.0
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if x_dpoly_x(coeffs, mid) < 1.0:
            lo = mid
        else:
            hi = mid
    x_star = 0.5 * (lo + hi)
    s_star = poly_x(coeffs, x_star) - math.log(x_star)
    if s_star > TANGENCY_TOL:
        return np.nan, NO_DELTA
    if s_star >= 0.0:
        return x_star, OK
    lo, hi = 1.0, x_star
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if poly_x(coeffs, mid) - math.log(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), OK


@njit(cache=True)
def delta_coefficients(f, u_prev, u_next, tau, G, phi):
    ints = derivative_integrals(f, u_prev, u_next, tau)
    p = f.size - 1
    out = np.empty(p - 1)
    gp = G * phi
    for m in range(1, p):
        out[m - 1] = gp ** m * ints[m]
    return out


@njit(cache=True)
def run(f, scheme, u0, tau1, tol, relative, max_steps, max_halvings):
    """Absolute (``relative=False``) or growth-relative (``relative=True``) step control.

    Returns per-slab arrays and a termination code
    (0 delta failed, 1 horizon reached, 2 overflow).
    """
    cap = min(max_steps, 1 << 16)
    rec = np.empty((cap, 9))
    n = 0
    t = 0.0
    u = u0
    tau = tau1
    bound = 0.0
    term = 1
    while n < max_steps:
        accepted = False
        u_next = u
        res = 0.0
        for _ in range(max_halvings + 1):
            u_next, status = step(scheme, f, u, tau)
            if status == OK:
                res = residual_integral(scheme, f, u, u_next, tau)
                if math.isfinite(res) and res <= tol:
                    accepted = True
                    break
            tau *= 0.5
        if not accepted:
            term = 2
            break
        ints1 = derivative_integrals(f, u, u_next, tau)
        expo = ints1[0]
        if not expo < 709.0:
            term = 2
            break
        G = math.exp(expo)
        phi = bound + res
        coeffs = delta_coefficients(f, u, u_next, tau, G, phi)
        delta, status = smallest_delta(coeffs)
        if status != OK:
            term = 0
            break
        b = delta * G * phi
        if not math.isfinite(b):
            term = 2
            break
        if n == rec.shape[0]:
            grown = np.empty((2 * rec.shape[0], 9))
            grown[:n] = rec[:n]
            rec = grown
        rec[n, 0] = t
        rec[n, 1] = tau
        rec[n, 2] = u
        rec[n, 3] = u_next
        rec[n, 4] = res
        rec[n, 5] = G
        rec[n, 6] = phi
        rec[n, 7] = delta
        rec[n, 8] = tol
        n += 1
        t = t + tau
        u = u_next
        bound = b
        if relative:
            tol = tol * G
    return rec[:n], term
