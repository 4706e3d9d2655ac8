"""Catalogue of named analytic data for the PDE driver.

Every entry is a closed-form expression with numeric parameters, so a run
configuration never needs an expression parser.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .dg import ProblemData
from .errors import ConfigError

__all__ = ["INITIAL", "VELOCITY", "FORCING", "PROBLEMS", "build_problem", "manufactured"]


def _gaussian(amplitude=10.0, rate=2.0):
    return lambda x, y: amplitude * np.exp(-rate * (x ** 2 + y ** 2))


def _volcano(amplitude=10.0, rate=0.5):
    def u0(x, y):
        r2 = x ** 2 + y ** 2
        return amplitude * r2 * np.exp(-rate * r2)
    return u0


def _zero_initial():
    return lambda x, y: np.zeros(np.broadcast(x, y).shape)


def _constant_velocity(ax=0.0, ay=0.0):
    if ax == 0.0 and ay == 0.0:
        return None
    return lambda x, y, t: (np.full(np.shape(x), float(ax)), np.full(np.shape(x), float(ay)))


def _rotating_velocity(omega=1.0):
    # solid body rotation, divergence free
    return lambda x, y, t: (-omega * y, omega * x)


def _constant_forcing(value=0.0):
    if value == 0.0:
        return None
    return lambda x, y, t: np.full(np.broadcast(x, y).shape, float(value))


INITIAL = {"gaussian": _gaussian, "volcano": _volcano, "zero": _zero_initial}
VELOCITY = {"constant": _constant_velocity, "rotation": _rotating_velocity}
FORCING = {"constant": _constant_forcing}


def manufactured(eps=1.0, ax=0.0, ay=0.0, half_width=1.0, decay=1.0, amplitude=1.0):
    """Smooth exact solution ``A exp(-decay t) cos(k x) cos(k y)``, ``k = pi / (2 L)``.

    The forcing is chosen so that the solution satisfies the model problem
    exactly on ``(-L, L)**2`` with homogeneous boundary values.
    """
    k = math.pi / (2.0 * half_width)

    def exact(x, y, t):
        return amplitude * math.exp(-decay * t) * np.cos(k * x) * np.cos(k * y)

    def f0(x, y, t):
        e = amplitude * math.exp(-decay * t)
        u = e * np.cos(k * x) * np.cos(k * y)
        ux = -e * k * np.sin(k * x) * np.cos(k * y)
        uy = -e * k * np.cos(k * x) * np.sin(k * y)
        # u_t - eps lap u + a.grad u + f0 - u**2 = 0
        return u ** 2 - (-decay * u + eps * 2 * k * k * u + ax * ux + ay * uy)

    data = ProblemData(eps=eps, velocity=_constant_velocity(ax, ay), f0=f0,
                       u0=lambda x, y: exact(x, y, 0.0), exact=exact, name="manufactured")
    return data, (-half_width, half_width, -half_width, half_width)


PROBLEMS: dict = {
    "example1": lambda eps=1.0, amplitude=10.0, rate=2.0: (
        ProblemData(eps=eps, u0=_gaussian(amplitude, rate), name="example1"),
        (-4.0, 4.0, -4.0, 4.0)),
    "example2": lambda eps=1.0, ax=1.0, ay=1.0, f0=-1.0: (
        ProblemData(eps=eps, velocity=_constant_velocity(ax, ay), f0=_constant_forcing(f0),
                    u0=_zero_initial(), name="example2"),
        (-4.0, 4.0, -4.0, 4.0)),
    "example3": lambda eps=1.0, amplitude=10.0, rate=0.5: (
        ProblemData(eps=eps, u0=_volcano(amplitude, rate), name="example3"),
        (-8.0, 8.0, -8.0, 8.0)),
    "manufactured": manufactured,
    "zero": lambda eps=1.0: (ProblemData(eps=eps, u0=_zero_initial(), name="zero"),
                             (-1.0, 1.0, -1.0, 1.0)),
}


def _call(table, spec, what) -> Callable:
    if not isinstance(spec, dict) or "name" not in spec:
        raise ConfigError(f"{what} needs a 'name' entry")
    params = {k: v for k, v in spec.items() if k != "name"}
    try:
        factory = table[spec["name"]]
    except KeyError:
        raise ConfigError(f"unknown {what} '{spec['name']}'; choose from {sorted(table)}")
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {what} '{spec['name']}': {exc}") from exc


def build_problem(problem=None, params=None, eps=1.0, box=None, initial=None,
                  velocity=None, forcing=None):
    """Problem data and domain box from a catalogue name or explicit blocks.

    Returns
    -------
    (ProblemData, box)
    """
    if problem is not None:
        if problem not in PROBLEMS:
            raise ConfigError(f"unknown problem '{problem}'; choose from {sorted(PROBLEMS)}")
        try:
            data, dbox = PROBLEMS[problem](**(params or {}))
        except TypeError as exc:
            raise ConfigError(f"bad parameters for problem '{problem}': {exc}") from exc
        return data, tuple(box) if box is not None else dbox
    if initial is None or box is None:
        raise ConfigError("give either 'problem' or 'initial' together with 'box'")
    u0 = _call(INITIAL, initial, "initial")
    a = _call(VELOCITY, velocity, "velocity") if velocity else None
    f0 = _call(FORCING, forcing, "forcing") if forcing else None
    return ProblemData(eps=eps, velocity=a, f0=f0, u0=u0, name="custom"), tuple(box)
