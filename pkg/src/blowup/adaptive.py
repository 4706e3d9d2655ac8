"""Space-time adaptive driver and blow-up diagnostics for the dG scheme.

The driver advances the IMEX dG scheme with the time step steered by the
time-integrated ``eta_T2**2`` and the mesh steered by the cellwise
``eta_S1**2``.  All four thresholds are multiplied by the growth factor
``G_k`` of every accepted slab so that the relative error is controlled as
the solution grows.  The run stops when the delta equation has no root.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .dg import DgField, ProblemData
from .errors import ConfigError, DegenerateFit, NoDelta, NumericalOverflow, SolverFailure
from .estimator import (BoundState, SlabEstimator, eta_I, eta_S1, slab_integrals,
                        space_for)
from .imex import ImexStepper, initial_field
from .mesh import MeshForest

__all__ = ["AdaptConfig", "StepRecord", "RunOutput", "BlowupDiagnostics",
           "algorithm3_run", "extrapolate_tstar", "blowup_rate_sequence",
           "fit_norm_growth", "diagnose"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptConfig:
    """Thresholds and discretisation settings of the adaptive driver.

    ``ttol_minus`` and ``stol_minus`` default to ``0.01 ttol_plus`` and
    ``1e-6 stol_plus``.  Cells at ``max_level`` are never refined and are
    ignored by the spatial acceptance test.
    """

    ttol_plus: float = 1.0
    stol_plus: float = 1e-3
    ttol_minus: Optional[float] = None
    stol_minus: Optional[float] = None
    tau1: float = 0.125
    p: int = 5
    gamma: float = 30.0
    box: tuple = (-4.0, 4.0, -4.0, 4.0)
    grid: tuple = (4, 4)
    max_level: int = 3
    max_halvings: int = 40
    max_initial_adapts: int = 20
    max_steps: int = 100000
    t_end: float = math.inf
    C: float = 1.0
    C_GN: float = 1.0

    def __post_init__(self):
        if self.ttol_minus is None:
            object.__setattr__(self, "ttol_minus", 0.01 * self.ttol_plus)
        if self.stol_minus is None:
            object.__setattr__(self, "stol_minus", 1e-6 * self.stol_plus)
        for name in ("ttol_plus", "stol_plus", "ttol_minus", "stol_minus", "tau1", "gamma"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be positive and finite")
        if not self.ttol_minus < self.ttol_plus:
            raise ConfigError("ttol_minus must be below ttol_plus")
        if not self.stol_minus < self.stol_plus:
            raise ConfigError("stol_minus must be below stol_plus")
        if int(self.p) < 1:
            raise ConfigError("polynomial degree must be at least 1")
        if self.max_level < 0:
            raise ConfigError("max_level must be non-negative")

    def initial_mesh(self) -> MeshForest:
        return MeshForest.uniform(self.box, self.grid[0], self.grid[1],
                                  max_level=self.max_level)


@dataclass
class StepRecord:
    k: int
    t: float
    tau: float
    cells: int
    linf: float
    eta_S1: float
    int_T2sq: float
    G: float
    delta: float
    Phi: float
    Psi: float
    ttol_plus: float
    stol_plus: float


@dataclass
class RunOutput:
    """Result of :func:`algorithm3_run`.

    ``records[0]`` describes the initial state (``k = 0``).
    """

    records: list
    ledger: list
    reason: str
    eta_I: float
    bound: float
    U0: Optional[DgField] = field(default=None, repr=False)
    U_final: Optional[DgField] = field(default=None, repr=False)
    mesh_sizes: list = field(default_factory=list)
    terminal: Optional[dict] = None

    @property
    def steps(self) -> int:
        return len(self.records) - 1

    @property
    def final_time(self) -> float:
        return self.records[-1].t

    @property
    def final_linf(self) -> float:
        return self.records[-1].linf

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def norms(self) -> np.ndarray:
        return np.array([r.linf for r in self.records])

    def diagnostics(self) -> "BlowupDiagnostics":
        return diagnose(self)


class _Trial:
    """One solved slab with its estimator pieces."""

    def __init__(self, stepper, data, cfg, k, U_prev, A_prev, mesh, t_prev, tau):
        space = space_for(mesh, cfg.p)
        self.state = stepper.step(k, U_prev, space, t_prev, tau, A_prev=A_prev)
        self.est = SlabEstimator(self.state, data, cfg.C)
        self.int_T2sq = _int_T2sq(self.est)
        self.s1, self.cells = eta_S1(space, self.state.U, self.state.A, data, t_prev + tau)
        self.mesh = mesh
        self.tau = tau


def _int_T2sq(est: SlabEstimator) -> float:
    from .dg import gauss_rule
    x, w = gauss_rule(4)
    t = est.t0 + 0.5 * est.tau * (x + 1.0)
    return float(sum(0.5 * est.tau * wi * est.eta_T2(ti) ** 2 for ti, wi in zip(t, w)))


def _marks(mesh: MeshForest, cells: np.ndarray, stol_plus, stol_minus):
    refinable = mesh.levels < mesh.max_level
    refine = np.nonzero((cells > stol_plus) & refinable)[0]
    coarsen = np.nonzero(cells < stol_minus)[0]
    return refine, coarsen


def algorithm3_run(data: ProblemData, cfg: AdaptConfig,
                   callback: Optional[Callable] = None) -> RunOutput:
    """Run the space-time adaptive algorithm until the delta equation fails.

    Parameters
    ----------
    data : ProblemData
    cfg : AdaptConfig
    callback : callable, optional
        Called with each accepted :class:`StepRecord`.
    """
    if data.gamma != cfg.gamma:
        data = replace(data, gamma=cfg.gamma)
    stepper = ImexStepper(data)
    ttp, ttm, stp, stm = cfg.ttol_plus, cfg.ttol_minus, cfg.stol_plus, cfg.stol_minus
    mesh = cfg.initial_mesh()
    tau = float(cfg.tau1)
    p = cfg.p

    # ---- initial phase: adapt the initial mesh and the first step
    halvings = adapts = 0
    while True:
        space0 = space_for(mesh, p)
        U0 = initial_field(space0, data.u0)
        A0 = stepper.initial_A(U0, 0.0)
        try:
            trial = _Trial(stepper, data, cfg, 1, U0, A0, mesh, 0.0, tau)
        except NumericalOverflow:
            trial = None
        if trial is None:
            time_bad, refine, coarsen = True, np.zeros(0, int), np.zeros(0, int)
        else:
            time_bad = trial.int_T2sq > ttp
            refine, coarsen = _marks(mesh, trial.cells, stp, stm)
        if not time_bad and refine.size == 0:
            break
        new_mesh = mesh.adapt(refine, coarsen) if (refine.size or coarsen.size) else mesh
        if new_mesh != mesh:
            adapts += 1
        if time_bad:
            tau *= 0.5
            halvings += 1
        if halvings > cfg.max_halvings or adapts > cfg.max_initial_adapts:
            raise SolverFailure("initial phase did not meet the thresholds")
        if new_mesh == mesh and not time_bad:
            break
        mesh = new_mesh
        log.debug("initial phase: cells=%d tau=%g", len(mesh), tau)

    s1_0, _ = eta_S1(space0, U0, A0, data, 0.0)
    eI = eta_I(space0, data.u0, U0)
    bound = BoundState(C=cfg.C, C_GN=cfg.C_GN, eta_I=eI)
    records = [StepRecord(0, 0.0, 0.0, len(mesh), U0.linf_norm(), s1_0, 0.0, 1.0, 1.0,
                          eI, eI, ttp, stp)]
    mesh_sizes = [len(mesh)]
    reason = "no_delta"
    terminal = None
    U_prev, A_prev, s1_prev, t = U0, A0, s1_0, 0.0
    k = 0
    pending = trial
    while True:
        if pending is None:
            # ---- main loop step
            if k >= cfg.max_steps:
                reason = "max_steps"
                break
            if t >= cfg.t_end:
                reason = "horizon"
                break
            try:
                tr = _Trial(stepper, data, cfg, k + 1, U_prev, A_prev, mesh, t, tau)
                halved = False
                if tr.int_T2sq > ttp:
                    tau *= 0.5
                    halved = True
                    tr = _Trial(stepper, data, cfg, k + 1, U_prev, A_prev, mesh, t, tau)
                if not halved and tr.int_T2sq < ttm:
                    tau *= 2.0
                    tr = _Trial(stepper, data, cfg, k + 1, U_prev, A_prev, mesh, t, tau)
                step = tau
                if t + tau > cfg.t_end:
                    # land on the horizon without touching the controlled step
                    step = cfg.t_end - t
                    tr = _Trial(stepper, data, cfg, k + 1, U_prev, A_prev, mesh, t, step)
                refine, coarsen = _marks(mesh, tr.cells, stp, stm)
                if refine.size or coarsen.size:
                    new_mesh = mesh.adapt(refine, coarsen)
                    if new_mesh != mesh:
                        mesh = new_mesh
                        tr = _Trial(stepper, data, cfg, k + 1, U_prev, A_prev, mesh, t, step)
            except NumericalOverflow:
                reason = "overflow"
                break
        else:
            tr, pending = pending, None
        slab = slab_integrals(tr.est, s1_prev, tr.s1, k=k + 1, per_cell=tr.cells,
                              eta_init=eI if k == 0 else 0.0)
        try:
            Phi, G, delta, Psi = bound.trial(slab, data.eps)
        except NoDelta:
            reason = "no_delta"
            terminal = _terminal(bound, slab, data.eps)
            break
        except NumericalOverflow:
            reason = "overflow"
            break
        bound.commit(slab, Phi, G, delta, Psi)
        k += 1
        t = t + tr.tau
        if abs(t - cfg.t_end) <= 1e-14 * max(1.0, abs(t)):
            t = cfg.t_end
        U_prev, A_prev, s1_prev = tr.state.U, tr.state.A, tr.s1
        ttp, ttm, stp, stm = ttp * G, ttm * G, stp * G, stm * G
        rec = StepRecord(k, t, tr.tau, len(tr.mesh), U_prev.linf_norm(), tr.s1,
                         tr.int_T2sq, G, delta, Phi, Psi, ttp, stp)
        records.append(rec)
        mesh_sizes.append(len(tr.mesh))
        if callback is not None:
            callback(rec)
        log.info("k=%d t=%.6g tau=%.3g cells=%d |U|=%.6g Psi=%.4g", k, t, tr.tau,
                 len(tr.mesh), rec.linf, Psi)

    return RunOutput(records, bound.history, reason, eI, bound.bound, U0, U_prev, mesh_sizes,
                     terminal)


def _terminal(bound: BoundState, slab, eps):
    """Data of the rejected slab: its ``c`` coefficient of the delta equation."""
    first = bound.k == 0
    prev = bound.eta_I if first else bound.psi
    base = bound.C * prev ** 2 if first else prev ** 2
    Phi = math.sqrt(base + bound.C * slab.int_A2) + bound.C * slab.int_B
    G = math.exp(min(slab.int_sigma, 700.0))
    c = bound.C_GN ** 2 * slab.tau * G ** 2 * Phi ** 2 / eps
    return dict(k=slab.k, tau=slab.tau, Phi=Phi, G=G, c=c, int_A2=slab.int_A2,
                int_B=slab.int_B, int_T2sq=slab.int_T2sq)


# ------------------------------------------------------------ diagnostics

@dataclass
class BlowupDiagnostics:
    t_star: float
    C_N: float
    p_sequence: np.ndarray
    final_linf: float
    N: int
    s: Optional[float] = None


def extrapolate_tstar(t_prev: float, norm_prev: float, t_last: float, norm_last: float):
    """Blow-up time from ``|U(t)| = C_N / (t* - t)`` through two samples.

    Returns
    -------
    (t_star, C_N)
    """
    if not norm_last != norm_prev:
        raise DegenerateFit("equal norms give no extrapolation")
    ts = (t_last * norm_last - t_prev * norm_prev) / (norm_last - norm_prev)
    return float(ts), float(norm_last * (ts - t_last))


def blowup_rate_sequence(times: Sequence[float], norms: Sequence[float],
                         t_star: float) -> np.ndarray:
    """``p_k = log(|U^k| / |U^{k-1}|) / log((t* - t^{k-1}) / (t* - t^k))``."""
    t = np.asarray(times, dtype=float)
    u = np.asarray(norms, dtype=float)
    if t.size < 2:
        return np.zeros(0)
    if np.any(t >= t_star):
        raise DegenerateFit("sample times must precede t*")
    return np.log(u[1:] / u[:-1]) / np.log((t_star - t[:-1]) / (t_star - t[1:]))


def fit_norm_growth(N: Sequence[float], norms: Sequence[float],
                    last: Optional[int] = None) -> float:
    """Least-squares slope of ``log |U|`` against ``log N``.

    ``last`` restricts the fit to the final ``last`` samples.
    """
    N = np.asarray(N, dtype=float)
    u = np.asarray(norms, dtype=float)
    if last is not None:
        N, u = N[-last:], u[-last:]
    if N.size < 2 or np.ptp(np.log(N)) == 0:
        raise DegenerateFit("need at least two distinct step counts")
    return float(np.polyfit(np.log(N), np.log(u), 1)[0])


def diagnose(run: RunOutput) -> BlowupDiagnostics:
    """t*, ``C_N`` and the rate sequence of one run (needs two accepted steps)."""
    recs = run.records
    if len(recs) < 3:
        raise DegenerateFit("need at least two accepted steps")
    a, b = recs[-2], recs[-1]
    ts, CN = extrapolate_tstar(a.t, a.linf, b.t, b.linf)
    ps = blowup_rate_sequence([r.t for r in recs], [r.linf for r in recs], ts)
    return BlowupDiagnostics(ts, CN, ps, b.linf, run.steps)
