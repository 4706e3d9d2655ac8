"""Command line interface: ``blowup ode|pde --config FILE`` and ``blowup rates FILES``.

Configurations are YAML (or JSON, which YAML reads too).  Unknown keys are
rejected.  All CSV output uses 17 significant digits.  The output directory
can be overridden with the ``BLOWUP_OUTPUT_DIR`` environment variable.

Exit codes: 0 success, 1 configuration or input error, 2 a run ended in
numerical overflow.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import yaml
from scipy.integrate import quad

from . import ode as _ode
from .adaptive import (AdaptConfig, algorithm3_run, blowup_rate_sequence,
                       extrapolate_tstar, fit_norm_growth)
from .dg import dump_field_csv
from .errors import BlowupError, ConfigError, DegenerateFit
from .estimator import write_ledger
from .problems import build_problem

__all__ = ["main", "load_config", "cmd_ode_run", "cmd_pde_run", "cmd_rates"]

log = logging.getLogger("blowup")

OUTPUT_ENV = "BLOWUP_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_OVERFLOW = 0, 1, 2

_TOP = {"mode", "output_dir", "seed", "ode", "pde"}
_ODE = {"coefficients", "power", "u0", "blowup_time", "schemes", "algorithm", "tau1",
        "ladder", "tolerances", "max_steps", "fit_last"}
_PDE = {"problem", "params", "eps", "box", "initial", "velocity", "forcing", "ladder",
        "tolerances", "adapt", "dump_fields"}
_LADDER = {"base", "count", "start", "scale"}
_ADAPT = {"stol_plus", "ttol_minus_factor", "stol_minus_factor", "tau1", "p", "gamma",
          "grid", "max_level", "max_halvings", "max_steps", "t_end", "C", "C_GN"}


def _fmt(v) -> str:
    if isinstance(v, (int,)) and not isinstance(v, bool):
        return str(v)
    return f"{float(v):.17g}"


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([x if isinstance(x, str) else _fmt(x) for x in r])


def _check_keys(block, allowed, where):
    if not isinstance(block, dict):
        raise ConfigError(f"'{where}' must be a mapping")
    extra = set(block) - allowed
    if extra:
        raise ConfigError(f"unknown keys in '{where}': {sorted(extra)}")


def load_config(path) -> dict:
    """Read and validate a configuration file."""
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a mapping")
    _check_keys(cfg, _TOP, "top level")
    mode = cfg.get("mode")
    if mode not in ("ode", "pde"):
        raise ConfigError("'mode' must be 'ode' or 'pde'")
    if mode not in cfg:
        raise ConfigError(f"missing '{mode}' block")
    _check_keys(cfg[mode], _ODE if mode == "ode" else _PDE, mode)
    block = cfg[mode]
    if "ladder" in block:
        _check_keys(block["ladder"], _LADDER, f"{mode}.ladder")
    if mode == "pde" and "adapt" in block:
        _check_keys(block["adapt"], _ADAPT, "pde.adapt")
    return cfg


def _tolerances(block) -> list:
    if "tolerances" in block:
        tols = [float(t) for t in block["tolerances"]]
    elif "ladder" in block:
        lad = block["ladder"]
        base = float(lad.get("base", 0.125))
        start = int(lad.get("start", 0))
        count = int(lad.get("count", 0))
        scale = float(lad.get("scale", 1.0))
        tols = [scale * base ** m for m in range(start, start + count)]
    else:
        raise ConfigError("give 'tolerances' or 'ladder'")
    if not tols:
        raise ConfigError("empty tolerance ladder")
    if any(not (t > 0 and math.isfinite(t)) for t in tols):
        raise ConfigError("tolerances must be positive")
    return tols


def _outdir(cfg) -> Path:
    out = Path(os.environ.get(OUTPUT_ENV) or cfg.get("output_dir") or "blowup_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ ode

def _blowup_time(f) -> float:
    """``T* = int_{u0}^inf du / f(u)`` by adaptive quadrature."""
    val, _ = quad(lambda u: 1.0 / float(f.poly(u)), f.u0, math.inf, limit=200)
    return float(val)


def cmd_ode_run(cfg: dict) -> int:
    """Run tolerance ladders for the polynomial ODE; write per-tolerance and rate CSVs."""
    b = cfg["ode"]
    u0 = float(b.get("u0", 1.0))
    try:
        if "power" in b:
            f = _ode.PolynomialOde.power(int(b["power"]), u0)
        elif "coefficients" in b:
            f = _ode.PolynomialOde(tuple(b["coefficients"]), u0, b.get("blowup_time"))
        else:
            raise ConfigError("give 'power' or 'coefficients'")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tols = _tolerances(b)
    schemes = b.get("schemes", ["explicit", "implicit", "improved"])
    algorithm = int(b.get("algorithm", 2))
    if algorithm not in (1, 2):
        raise ConfigError("'algorithm' must be 1 or 2")
    tau1 = float(b.get("tau1", 0.1))
    max_steps = int(b.get("max_steps", 50_000_000))
    fit_last = b.get("fit_last")
    out = _outdir(cfg)
    Tstar = f.analytic_blowup_time
    if Tstar is None and f.u0 > 0:
        Tstar = _blowup_time(f)
    rate_rows = []
    status = EXIT_OK
    for name in schemes:
        try:
            scheme = _ode.Scheme.parse(name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        samples, results = _ode.rate_ladder(f, scheme, tols, tau1, algorithm, max_steps)
        rows = [(tol, N, T, bound, r.termination.value)
                for (tol, N, T, bound), r in zip(samples, results)]
        if any(r.termination is _ode.Termination.OVERFLOW for r in results):
            status = EXIT_OVERFLOW
        _write_csv(out / f"ode_{scheme.value}.csv", ["tol", "N", "T", "bound", "termination"], rows)
        if len(samples) >= 2 and Tstar is not None:
            try:
                fit = _ode.fit_rate(samples, Tstar, last=fit_last)
                rate_rows.append((scheme.value, algorithm, f.degree, fit.rate))
            except DegenerateFit as exc:
                log.warning("no rate for %s: %s", scheme.value, exc)
    if rate_rows:
        _write_csv(out / "ode_rates.csv", ["scheme", "algorithm", "degree", "r"], rate_rows)
        for s, a, p, r in rate_rows:
            print(f"{s:10s} algorithm {a} p={p}: r = {r:.3f}")
    return status


# ------------------------------------------------------------------ pde

def _adapt_config(block, ttol, box) -> AdaptConfig:
    a = dict(block.get("adapt", {}))
    kw = {}
    for key in ("stol_plus", "tau1", "p", "gamma", "max_level", "max_halvings",
                "max_steps", "t_end", "C", "C_GN"):
        if key in a:
            kw[key] = a[key]
    if "grid" in a:
        kw["grid"] = tuple(int(g) for g in a["grid"])
    if "ttol_minus_factor" in a:
        kw["ttol_minus"] = float(a["ttol_minus_factor"]) * ttol
    stol = float(kw.get("stol_plus", AdaptConfig.stol_plus))
    if "stol_minus_factor" in a:
        kw["stol_minus"] = float(a["stol_minus_factor"]) * stol
    return AdaptConfig(ttol_plus=ttol, box=tuple(float(v) for v in box), **kw)


def dump_mesh_csv(mesh, path):
    """Active cells as ``x, y, hx, hy, level`` (centre and width)."""
    c, h, lev = mesh.centers, mesh.sizes, mesh.levels
    _write_csv(Path(path), ["x", "y", "hx", "hy", "level"],
               [(float(c[i, 0]), float(c[i, 1]), float(h[i, 0]), float(h[i, 1]), int(lev[i]))
                for i in range(len(lev))])


def cmd_pde_run(cfg: dict) -> int:
    """Run the adaptive dG driver over a ladder of temporal thresholds."""
    b = cfg["pde"]
    data, box = build_problem(problem=b.get("problem"), params=b.get("params"),
                              eps=float(b.get("eps", 1.0)), box=b.get("box"),
                              initial=b.get("initial"), velocity=b.get("velocity"),
                              forcing=b.get("forcing"))
    tols = _tolerances(b)
    dump = bool(b.get("dump_fields", True))
    out = _outdir(cfg)
    summary = []
    status = EXIT_OK
    for m, ttol in enumerate(tols):
        ac = _adapt_config(b, ttol, box)
        run = algorithm3_run(data, ac)
        if run.reason == "overflow":
            status = EXIT_OVERFLOW
        summary.append((ttol, run.steps, run.bound, run.final_time, run.final_linf, run.reason))
        write_ledger(run.ledger, out / f"pde_ledger_{m}.csv")
        _write_csv(out / f"pde_steps_{m}.csv", ["k", "t", "tau", "cells", "linf"],
                   [(r.k, r.t, r.tau, r.cells, r.linf) for r in run.records])
        if dump:
            dump_field_csv(run.U0, out / f"pde_field_{m}_initial.csv")
            dump_field_csv(run.U_final, out / f"pde_field_{m}_final.csv")
            dump_mesh_csv(run.U0.mesh, out / f"pde_mesh_{m}_initial.csv")
            dump_mesh_csv(run.U_final.mesh, out / f"pde_mesh_{m}_final.csv")
        print(f"ttol+={ttol:.6g}: N={run.steps} T={run.final_time:.6g} "
              f"|U|={run.final_linf:.6g} bound={run.bound:.6g} ({run.reason})")
    _write_csv(out / "pde_summary.csv", ["ttol_plus", "N", "final_bound", "T", "linf", "reason"],
               summary)
    return status


# ---------------------------------------------------------------- rates

def _read_rows(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    return rows


def _column(rows, name, path, cast=float):
    try:
        return [cast(r[name]) for r in rows]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: bad or missing column '{name}'") from exc


def cmd_rates(paths, blowup_time=None, out_path=None, last=None) -> int:
    """Fit rates from CSVs written by the other commands (or typed by hand).

    * ``tol, N, T`` columns and a known blow-up time: ODE rate ``r``.
    * ``N, linf`` columns: growth exponent ``s``; with ``T`` also ``t*``
      from the last two rows.
    * ``t, linf`` columns: ``t*`` from the last two rows and the ``p_k``
      sequence.

    ``last`` limits the ``r`` and ``s`` fits to the final rows.
    """
    report = []
    for path in paths:
        rows = _read_rows(path)
        cols = set(rows[0])
        done = False
        if {"tol", "N", "T"} <= cols and blowup_time is not None:
            samples = list(zip(_column(rows, "tol", path), _column(rows, "N", path, int),
                               _column(rows, "T", path)))
            fit = _ode.fit_rate(samples, blowup_time, last=last)
            report.append((str(path), "r", fit.rate))
            done = True
        if {"N", "linf"} <= cols:
            N = _column(rows, "N", path)
            u = _column(rows, "linf", path)
            report.append((str(path), "s", fit_norm_growth(N, u, last)))
            if "T" in cols and len(rows) >= 2:
                T = _column(rows, "T", path)
                ts, _ = extrapolate_tstar(T[-2], u[-2], T[-1], u[-1])
                report.append((str(path), "t_star", ts))
            done = True
        if {"t", "linf"} <= cols:
            t = _column(rows, "t", path)
            u = _column(rows, "linf", path)
            if len(t) < 2:
                raise DegenerateFit(f"{path}: need two rows")
            ts, CN = extrapolate_tstar(t[-2], u[-2], t[-1], u[-1])
            ps = blowup_rate_sequence(t, u, ts)
            report += [(str(path), "t_star", ts), (str(path), "C_N", CN)]
            tail = ps[-max(1, len(ps) // 4):]
            report.append((str(path), "p_tail_mean", float(sum(tail) / len(tail))))
            done = True
        if not done:
            raise ConfigError(f"{path}: no recognised column set")
    for p, k, v in report:
        print(f"{p}: {k} = {v:.6g}")
    if out_path is not None:
        _write_csv(Path(out_path), ["file", "quantity", "value"], report)
    return EXIT_OK


# ----------------------------------------------------------------- main

def _parser():
    ap = argparse.ArgumentParser(prog="blowup", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("ode", "pde"):
        sp = sub.add_parser(name, help=f"run the {name.upper()} pipeline")
        sp.add_argument("--config", required=True)
    sp = sub.add_parser("rates", help="fit rates from CSV files")
    sp.add_argument("files", nargs="+")
    sp.add_argument("--blowup-time", type=float, default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--last", type=int, default=None,
                    help="fit only the last LAST rows of each file")
    return ap


def main(argv=None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rates":
            return cmd_rates(args.files, args.blowup_time, args.out, args.last)
        cfg = load_config(args.config)
        if cfg["mode"] != args.command:
            raise ConfigError(f"config mode '{cfg['mode']}' does not match '{args.command}'")
        return cmd_ode_run(cfg) if args.command == "ode" else cmd_pde_run(cfg)
    except (ConfigError, DegenerateFit) as exc:
        print(f"blowup: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BlowupError as exc:
        print(f"blowup: run failed: {exc}", file=sys.stderr)
        return EXIT_OVERFLOW


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
