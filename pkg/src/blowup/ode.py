"""Adaptive time stepping for scalar ODEs ``u' = f(u)`` that blow up.

``f`` is a polynomial with the blow-up hypothesis ``alpha_i >= 0`` for
``1 <= i < p`` and ``alpha_p > 0``.  Three one-step schemes are available and
each accepted step carries a conditional a posteriori bound
``|u - U| <= delta_k G_k phi_k`` on its slab.  The two driver loops differ
only in whether the residual tolerance is scaled by the growth factor after
each step (absolute vs. relative error control).

The per-step arithmetic lives in compiled kernels (:mod:`._ode_kernels`) so
that tolerance ladders with millions of steps run in seconds; the functions
here validate inputs, translate status codes into exceptions and package
results.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.legendre import leggauss

from . import _ode_kernels as _k
from .delta import delta_function
from .errors import DegenerateFit, ImplicitNoRoot, NoDelta, NumericalOverflow

__all__ = [
    "PolynomialOde", "Scheme", "OdeSlab", "Termination", "RunResult", "RateFit",
    "step", "residual_integral", "growth_factor", "phi", "delta_coefficients",
    "solve_delta_ode", "delta_residual", "run_algorithm1", "run_algorithm2",
    "fit_rate", "rate_ladder", "abs_integral",
]

MAX_HALVINGS = 60


class Scheme(enum.Enum):
    EXPLICIT = "explicit"
    IMPLICIT = "implicit"
    IMPROVED = "improved"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("euler", "").strip("_ -")
        return cls(key)

    @property
    def code(self) -> int:
        return {"explicit": _k.EXPLICIT, "implicit": _k.IMPLICIT,
                "improved": _k.IMPROVED}[self.value]


class Termination(enum.Enum):
    DELTA_FAILED = "DeltaFailed"
    HORIZON_REACHED = "HorizonReached"
    OVERFLOW = "Overflow"


_TERMINATION_CODES = {0: Termination.DELTA_FAILED, 1: Termination.HORIZON_REACHED,
                      2: Termination.OVERFLOW}


@dataclass(frozen=True)
class PolynomialOde:
    """``u' = sum_j coeffs[j] u**j`` with ``u(0) = u0``."""

    coeffs: tuple
    u0: float
    analytic_blowup_time: Optional[float] = None
    _c: np.ndarray = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        c = tuple(float(a) for a in self.coeffs)
        while len(c) > 1 and c[-1] == 0.0:
            c = c[:-1]
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "u0", float(self.u0))
        if len(c) < 3:
            raise ValueError("degree must be at least 2")
        if not all(math.isfinite(a) for a in c) or not math.isfinite(self.u0):
            raise ValueError("coefficients and u0 must be finite")
        if c[-1] <= 0 or any(a < 0 for a in c[1:-1]):
            raise ValueError("need alpha_i >= 0 (0 < i < p) and alpha_p > 0")
        if self.analytic_blowup_time is not None:
            expected = _closed_form_blowup(c, self.u0)
            if expected is not None and not math.isclose(
                    expected, self.analytic_blowup_time, rel_tol=1e-12):
                raise ValueError(
                    f"blow-up time {self.analytic_blowup_time} inconsistent "
                    f"with closed form {expected}")
        arr = np.array(c, dtype=float)
        arr.flags.writeable = False
        object.__setattr__(self, "_c", arr)

    @classmethod
    def power(cls, p: int, u0: float = 1.0) -> "PolynomialOde":
        """``u' = u**p``, whose blow-up time is ``1 / ((p-1) u0**(p-1))``."""
        coeffs = [0.0] * p + [1.0]
        return cls(tuple(coeffs), u0, 1.0 / ((p - 1) * u0 ** (p - 1)))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    @property
    def poly(self) -> Polynomial:
        return Polynomial(self.coeffs)

    def __call__(self, u):
        if isinstance(u, float):
            return _k.horner(self._c, u)
        return self.poly(u)

    def exact(self, t):
        """Exact solution for pure powers ``u**p``; ``None`` otherwise."""
        c = self.coeffs
        if any(a != 0.0 for a in c[:-1]) or c[-1] != 1.0:
            return None
        p = self.degree
        return self.u0 / (1.0 - (p - 1) * self.u0 ** (p - 1) * np.asarray(t)) ** (1.0 / (p - 1))


def _closed_form_blowup(coeffs, u0):
    if u0 <= 0 or any(a != 0.0 for a in coeffs[:-1]) or coeffs[-1] != 1.0:
        return None
    p = len(coeffs) - 1
    return 1.0 / ((p - 1) * u0 ** (p - 1))


@dataclass(frozen=True)
class OdeSlab:
    k: int
    t_start: float
    tau: float
    u_prev: float
    u_next: float
    residual_int: float
    growth: float
    phi: float
    delta: Optional[float]
    tol: float

    @property
    def t_end(self) -> float:
        return self.t_start + self.tau

    @property
    def bound(self) -> float:
        if self.delta is None:
            return math.inf
        return self.delta * self.growth * self.phi

    def interpolant(self, t):
        """Piecewise-linear reconstruction ``U(t)`` on this slab."""
        s = (np.asarray(t) - self.t_start) / self.tau
        return (1.0 - s) * self.u_prev + s * self.u_next


# column layout of RunResult.records
_COLS = ("t_start", "tau", "u_prev", "u_next", "residual_int", "growth", "phi",
         "delta", "tol")


@dataclass
class RunResult:
    """Accepted slabs of one run, stored column-wise.

    ``records`` has one row per accepted slab with columns
    ``t_start, tau, u_prev, u_next, residual_int, growth, phi, delta, tol``.
    :attr:`slabs` materialises :class:`OdeSlab` objects on first access.
    """

    records: np.ndarray = field(repr=False)
    termination: Termination

    def column(self, name: str) -> np.ndarray:
        return self.records[:, _COLS.index(name)]

    @cached_property
    def slabs(self) -> list:
        return [OdeSlab(i + 1, *map(float, row)) for i, row in enumerate(self.records)]

    @property
    def steps(self) -> int:
        return int(self.records.shape[0])

    @property
    def final_time(self) -> float:
        if self.steps == 0:
            return 0.0
        # same floating-point accumulation as the driver
        return float(self.records[-1, 0] + self.records[-1, 1])

    @property
    def times(self) -> np.ndarray:
        if self.steps == 0:
            return np.zeros(1)
        return np.concatenate([[0.0], self.records[:, 0] + self.records[:, 1]])

    @property
    def values(self) -> np.ndarray:
        if self.steps == 0:
            return np.array([])
        return np.concatenate([self.records[:1, 2], self.records[:, 3]])

    @property
    def bounds(self) -> np.ndarray:
        r = self.records
        return r[:, 7] * r[:, 5] * r[:, 6]


@dataclass
class RateFit:
    samples: list
    lambdas: np.ndarray = field(repr=False)
    rate: float


# ---------------------------------------------------------------- stepping

def step(scheme, f: PolynomialOde, u_prev: float, tau: float) -> float:
    """Advance one step of the chosen one-step scheme.

    The implicit variant solves ``tau f(U) - U + u_prev = 0`` (closed form
    for quadratics, companion-matrix roots otherwise), keeps the real root
    closest to ``u_prev`` and polishes it with Newton.

    Raises
    ------
    ImplicitNoRoot
        If the implicit equation has no real solution (halve ``tau``).
    NumericalOverflow
        If the result is not finite.
    """
    scheme = Scheme.parse(scheme)
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not math.isfinite(u_prev):
        raise NumericalOverflow("non-finite previous value")
    with np.errstate(over="ignore", invalid="ignore"):
        u, status = _k.step(scheme.code, f._c, float(u_prev), float(tau))
    if status == _k.NO_ROOT:
        raise ImplicitNoRoot(f"no real root for u_prev={u_prev}, tau={tau}")
    if status != _k.OK:
        raise NumericalOverflow(f"step produced {u}")
    return float(u)


# ------------------------------------------------------- slab integrals

def abs_integral(poly: Polynomial, a: float = 0.0, b: float = 1.0) -> float:
    """Exact ``int_a^b |poly(s)| ds``.

    The interval is split at the real roots of ``poly`` and each signed
    piece is integrated with a Gauss-Legendre rule exact for its degree.
    """
    deg = max(poly.degree(), 0)
    cuts = [a, b]
    if deg >= 1:
        r = poly.roots()
        r = r[np.abs(r.imag) <= 1e-12 * np.maximum(1.0, np.abs(r.real))].real
        cuts += [x for x in r if a < x < b]
    cuts = np.sort(np.array(cuts))
    nodes, weights = leggauss(deg // 2 + 1)
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi <= lo:
            continue
        x = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
        total += abs(0.5 * (hi - lo) * np.dot(weights, poly(x)))
    return float(total)


def residual_integral(f: PolynomialOde, scheme, u_prev: float, u_next: float,
                      tau: float) -> float:
    """``int |f(U(s)) - F| ds`` over a slab of length ``tau``.

    ``U`` is linear from ``u_prev`` to ``u_next`` and ``F`` the scheme's
    increment; the absolute value is integrated exactly by splitting at the
    sign change.
    """
    scheme = Scheme.parse(scheme)
    with np.errstate(over="ignore", invalid="ignore"):
        val = _k.residual_integral(scheme.code, f._c, float(u_prev),
                                   float(u_next), float(tau))
    if not math.isfinite(val):
        raise NumericalOverflow("non-finite residual integral")
    return float(val)


def growth_factor(f: PolynomialOde, u_prev: float, u_next: float, tau: float) -> float:
    """``exp(int |f'(U(s))| ds)`` over the slab."""
    expo = _k.derivative_integrals(f._c, float(u_prev), float(u_next), float(tau))[0]
    if not expo < 709.0:
        raise NumericalOverflow(f"growth exponent {expo} overflows")
    return math.exp(expo)


def phi(prev_bound: float, residual_int: float) -> float:
    """``|e(t^{k-1})|`` (estimated by the previous bound) plus the residual."""
    return prev_bound + residual_int


def delta_coefficients(f: PolynomialOde, u_prev, u_next, tau, G, phi_k):
    """Coefficients ``C_m = (G phi)**m I_{m+1}``, ``m = 1..p-1``, where
    ``I_j = int |f^{(j)}(U)| / j! ds``."""
    with np.errstate(over="ignore"):
        c = _k.delta_coefficients(f._c, float(u_prev), float(u_next), float(tau),
                                  float(G), float(phi_k))
    return [float(x) for x in c]


def solve_delta_ode(f: PolynomialOde, u_prev, u_next, tau, G, phi_k) -> float:
    """Smallest ``delta > 1`` solving the ODE delta equation.

    Raises
    ------
    NoDelta
        If the time step is too large for a root to exist.
    """
    coeffs = delta_coefficients(f, u_prev, u_next, tau, G, phi_k)
    delta, status = _k.smallest_delta(np.asarray(coeffs, dtype=float))
    if status != _k.OK:
        raise NoDelta("delta equation has no root above 1")
    return float(delta)


def delta_residual(f: PolynomialOde, slab: OdeSlab, x: float) -> float:
    """Value of the delta-equation function at ``x`` for a stored slab."""
    coeffs = delta_coefficients(f, slab.u_prev, slab.u_next, slab.tau,
                                slab.growth, slab.phi)
    return delta_function(coeffs, x)


# ----------------------------------------------------------- algorithms

def _run(f: PolynomialOde, scheme, tau1: float, tol: float, relative: bool,
         max_steps: int) -> RunResult:
    scheme = Scheme.parse(scheme)
    if not (tau1 > 0 and tol > 0):
        raise ValueError("tau1 and tol must be positive")
    if not (math.isfinite(tau1) and math.isfinite(tol)):
        raise ValueError("tau1 and tol must be finite")
    with np.errstate(over="ignore", invalid="ignore"):
        rec, code = _k.run(f._c, scheme.code, f.u0, float(tau1), float(tol),
                           bool(relative), int(max_steps), MAX_HALVINGS)
    return RunResult(np.ascontiguousarray(rec), _TERMINATION_CODES[int(code)])


def run_algorithm1(f: PolynomialOde, scheme, tau1: float, tol: float,
                   max_steps: int = 50_000_000) -> RunResult:
    """Absolute-tolerance driver: halve ``tau`` until the residual passes.

    The step length is inherited from the previous slab and never grows.
    The run stops at the first slab whose delta equation has no root; that
    slab is not part of the result.
    """
    return _run(f, scheme, tau1, tol, relative=False, max_steps=max_steps)


def run_algorithm2(f: PolynomialOde, scheme, tau1: float, tol: float,
                   max_steps: int = 50_000_000) -> RunResult:
    """As :func:`run_algorithm1`, but ``tol`` is multiplied by ``G_k`` after
    every accepted step (relative error control)."""
    return _run(f, scheme, tau1, tol, relative=True, max_steps=max_steps)


def fit_rate(samples: Sequence, blowup_time: Optional[float] = None,
             last: Optional[int] = None) -> RateFit:
    """Fit ``lambda = |T* - T| ~ N**(-r)`` by least squares in log-log.

    Parameters
    ----------
    samples : sequence
        Items ``(tol, N, T)`` or ``(tol, N, T, lam)``; ``lam`` is taken as
        given when ``blowup_time`` is ``None``.
    blowup_time : float, optional
        The analytic ``T*``.
    last : int, optional
        Use only the last ``last`` samples (the asymptotic regime of a
        tolerance ladder).
    """
    samples = [tuple(s) for s in samples]
    if last is not None:
        samples = samples[-last:]
    if blowup_time is None:
        lam = np.array([s[3] for s in samples], dtype=float)
    else:
        lam = np.abs(blowup_time - np.array([s[2] for s in samples], dtype=float))
    N = np.array([s[1] for s in samples], dtype=float)
    if len(samples) < 2 or len(np.unique(N)) < 2:
        raise DegenerateFit("need at least two samples with distinct N")
    if np.any(lam <= 0) or np.any(N <= 0):
        raise DegenerateFit("lambda and N must be positive")
    slope = np.polyfit(np.log(N), np.log(lam), 1)[0]
    return RateFit(samples, lam, float(-slope))


def rate_ladder(f: PolynomialOde, scheme, tols: Sequence[float], tau1: float = 0.1,
                algorithm: int = 2, max_steps: int = 50_000_000):
    """Run one algorithm over a tolerance ladder.

    Returns
    -------
    samples : list of (tol, N, T, bound)
        ``bound`` is the last accepted cumulative bound.
    results : list of RunResult
        Only the final slab of each run is kept to bound memory.
    """
    runner = {1: run_algorithm1, 2: run_algorithm2}[int(algorithm)]
    samples, results = [], []
    for tol in tols:
        res = runner(f, scheme, tau1, tol, max_steps=max_steps)
        last_bound = float(res.bounds[-1]) if res.steps else 0.0
        samples.append((float(tol), res.steps, res.final_time, last_bound))
        results.append(RunResult(res.records[-1:].copy(), res.termination))
    return samples, results
