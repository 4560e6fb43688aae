"""Configuration-driven experiment runner.

Subcommands: `run` (single simulation, trajectory CSV + JSON summary),
`convergence` (rate table CSV), `check` (property suites with exit codes
usable from CI: 0 pass, 1 fail, 2 configuration error).  Configs are
strict JSON: unknown keys are rejected and all validation errors are
reported together.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import coupling, fespace, mesh, timepoly, verify

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


_TOP_KEYS = {"geometry", "problem", "scheme", "window", "solver", "experiment", "output"}
_GEOMETRY_KEYS = {"nx", "ny"}
_PROBLEM_KEYS = {"nu", "advection", "B", "forcing", "initial"}
_ADVECTION_KEYS = {"preset", "sx", "amplitude"}
_SCHEME_KEYS = {"name", "q", "n_s", "k_s", "thetas", "D", "quadrature"}
_WINDOW_KEYS = {"t_f", "N", "M1", "M2", "r1", "r2", "N0"}
_SOLVER_KEYS = {"name", "tol", "max_iter"}
_EXPERIMENT_KEYS = {"kind", "levels", "target", "oracle_scheme", "oracle_steps", "spin_up"}

_FORCING_PRESETS = ("zero", "pulse")
_INITIAL_PRESETS = ("zero", "bump")


@dataclasses.dataclass
class RunConfig:
    geometry: dict
    problem: dict
    scheme: timepoly.SchemeSpec
    quadrature: str
    window: coupling.WindowConfig
    solver: dict
    experiment: dict
    output: str | None
    raw: dict


def _check_keys(problems, obj, allowed, where):
    if not isinstance(obj, dict):
        problems.append(f"{where}: expected an object")
        return False
    for key in obj:
        if key not in allowed:
            problems.append(f"{where}.{key}: unknown key")
    return True


def _get(problems, obj, key, where, kind, default=None, required=False):
    if key not in obj:
        if required:
            problems.append(f"{where}.{key}: missing")
        return default
    val = obj[key]
    if kind is float and isinstance(val, (int, float)) and not isinstance(val, bool):
        return float(val)
    if kind is int and isinstance(val, int) and not isinstance(val, bool):
        return val
    if kind is str and isinstance(val, str):
        return val
    if kind is list and isinstance(val, list):
        return val
    problems.append(f"{where}.{key}: expected {kind.__name__}")
    return default


def parse_config(text: str) -> RunConfig:
    """Parse and fully validate a JSON config; raises ConfigError listing
    every problem found, not just the first."""
    problems: list[str] = []
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError([f"invalid JSON: {err}"]) from err
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected an object"])
    for key in raw:
        if key not in _TOP_KEYS:
            problems.append(f"{key}: unknown key")

    geometry = {"nx": (8, 8), "ny": (8, 8)}
    geo = raw.get("geometry", {})
    if _check_keys(problems, geo, _GEOMETRY_KEYS, "geometry"):
        for key in ("nx", "ny"):
            val = geo.get(key)
            if val is None:
                continue
            if isinstance(val, int) and not isinstance(val, bool):
                val = [val, val]
            if (
                isinstance(val, list)
                and len(val) == 2
                and all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in val)
            ):
                geometry[key] = tuple(val)
            else:
                problems.append(f"geometry.{key}: expected a positive int or pair")

    problem = {
        "nu": (1.0, 1.0),
        "advection": (fespace.AdvectionSpec(), fespace.AdvectionSpec()),
        "B": np.array([[1.0, -1.0], [-1.0, 1.0]]),
        "forcing": "zero",
        "initial": "bump",
    }
    prob = raw.get("problem", {})
    if _check_keys(problems, prob, _PROBLEM_KEYS, "problem"):
        nu = prob.get("nu")
        if nu is not None:
            if (
                isinstance(nu, list)
                and len(nu) == 2
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in nu)
                and all(v > 0 for v in nu)
            ):
                problem["nu"] = (float(nu[0]), float(nu[1]))
            else:
                problems.append("problem.nu: expected a pair of positive numbers")
        adv = prob.get("advection")
        if adv is not None:
            if isinstance(adv, dict):
                adv = [adv, adv]
            if isinstance(adv, list) and len(adv) == 2:
                specs = []
                for k, one in enumerate(adv):
                    where = f"problem.advection[{k}]"
                    if not _check_keys(problems, one, _ADVECTION_KEYS, where):
                        continue
                    preset = _get(problems, one, "preset", where, str, "zero", required=True)
                    try:
                        specs.append(
                            fespace.AdvectionSpec(
                                kind=preset or "zero",
                                sx=float(one.get("sx", 0.0)),
                                amplitude=float(one.get("amplitude", 1.0)),
                            )
                        )
                    except ValueError as err:
                        problems.append(f"{where}: {err}")
                if len(specs) == 2:
                    problem["advection"] = tuple(specs)
            else:
                problems.append("problem.advection: expected an object or a pair of objects")
        Braw = prob.get("B")
        if Braw is not None:
            arr = np.asarray(Braw, dtype=object)
            ok = arr.shape == (2, 2) and all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in arr.ravel()
            )
            if ok:
                problem["B"] = np.asarray(Braw, dtype=float)
            else:
                problems.append("problem.B: expected a 2x2 numeric matrix")
        forcing = _get(problems, prob, "forcing", "problem", str, "zero")
        if forcing is not None:
            if forcing in _FORCING_PRESETS or forcing.startswith("mms:"):
                problem["forcing"] = forcing
                if forcing.startswith("mms:") and forcing[4:] not in verify._MMS_FORMS:
                    problems.append(
                        f"problem.forcing: unknown manufactured preset {forcing[4:]!r}"
                    )
            else:
                problems.append(
                    f"problem.forcing: expected one of {_FORCING_PRESETS} or 'mms:<name>'"
                )
        initial = _get(problems, prob, "initial", "problem", str, "bump")
        if initial is not None:
            if initial in _INITIAL_PRESETS:
                problem["initial"] = initial
            else:
                problems.append(f"problem.initial: expected one of {_INITIAL_PRESETS}")

    scheme_spec = None
    quadrature = None
    sch = raw.get("scheme", {"name": "crank-nicolson"})
    if _check_keys(problems, sch, _SCHEME_KEYS, "scheme"):
        name = _get(problems, sch, "name", "scheme", str, "crank-nicolson")
        quadrature = _get(problems, sch, "quadrature", "scheme", str)
        if quadrature is not None and quadrature not in ("exact", "trapezoid"):
            problems.append("scheme.quadrature: expected 'exact' or 'trapezoid'")
            quadrature = None
        if name == "crank-nicolson":
            scheme_spec = timepoly.crank_nicolson()
            quadrature = quadrature or "trapezoid"
        elif name == "dg":
            q = _get(problems, sch, "q", "scheme", int, None, required=True)
            if q is not None:
                n_s = _get(problems, sch, "n_s", "scheme", int, 0)
                k_s = _get(problems, sch, "k_s", "scheme", int, 0)
                thetas = sch.get("thetas", [])
                D = sch.get("D", [])
                try:
                    scheme_spec = timepoly.SchemeSpec(
                        q=q, n_s=n_s, k_s=k_s, thetas=tuple(thetas), D=np.asarray(D, dtype=float)
                        if len(np.atleast_1d(D))
                        else np.zeros((0, k_s + 1)),
                        name="dg",
                    )
                except timepoly.SchemeError as err:
                    problems.append(f"scheme: {err}")
            quadrature = quadrature or "exact"
        elif name in timepoly.shipped_schemes():
            scheme_spec = timepoly.shipped_schemes()[name]
            quadrature = quadrature or "exact"
        else:
            problems.append(f"scheme.name: unknown scheme {name!r}")

    window_cfg = None
    win = raw.get("window", {})
    if _check_keys(problems, win, _WINDOW_KEYS, "window"):
        t_f = _get(problems, win, "t_f", "window", float, 1.0)
        N = _get(problems, win, "N", "window", int, 8)
        M1 = _get(problems, win, "M1", "window", int, 1)
        M2 = _get(problems, win, "M2", "window", int, 1)
        r1 = _get(problems, win, "r1", "window", int, 1)
        r2 = _get(problems, win, "r2", "window", int, 1)
        N0 = _get(problems, win, "N0", "window", int, None)
        try:
            window_cfg = coupling.WindowConfig(
                t_f=t_f, N=N, M=(M1, M2), r=(r1, r2), N0=N0
            )
        except (ValueError, TypeError) as err:
            problems.append(f"window: {err}")

    solver = {"name": "direct", "tol": 1e-10, "max_iter": 200}
    sol = raw.get("solver", {})
    if _check_keys(problems, sol, _SOLVER_KEYS, "solver"):
        name = _get(problems, sol, "name", "solver", str, "direct")
        if name not in ("direct", "fixed-point"):
            problems.append("solver.name: expected 'direct' or 'fixed-point'")
        else:
            solver["name"] = name
        solver["tol"] = _get(problems, sol, "tol", "solver", float, 1e-10)
        solver["max_iter"] = _get(problems, sol, "max_iter", "solver", int, 200)

    experiment = {
        "kind": "run",
        "levels": 4,
        "target": "l2",
        "oracle_scheme": "cn",
        "oracle_steps": None,
        "spin_up": 0.0,
    }
    exp = raw.get("experiment", {})
    if _check_keys(problems, exp, _EXPERIMENT_KEYS, "experiment"):
        kind = _get(problems, exp, "kind", "experiment", str, "run")
        if kind not in ("run", "convergence", "conservation", "energy"):
            problems.append("experiment.kind: expected run|convergence|conservation|energy")
        else:
            experiment["kind"] = kind
        experiment["levels"] = _get(problems, exp, "levels", "experiment", int, 4)
        target = _get(problems, exp, "target", "experiment", str, "l2")
        if target not in ("l2", "nodal", "sync", "flux"):
            problems.append("experiment.target: expected l2|nodal|sync|flux")
        else:
            experiment["target"] = target
        experiment["oracle_scheme"] = _get(
            problems, exp, "oracle_scheme", "experiment", str, "cn"
        )
        experiment["oracle_steps"] = _get(problems, exp, "oracle_steps", "experiment", int, None)
        spin_up = _get(problems, exp, "spin_up", "experiment", float, 0.0)
        if spin_up is not None:
            if spin_up < 0:
                problems.append("experiment.spin_up: must be nonnegative")
            else:
                experiment["spin_up"] = spin_up

    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        problems.append("output: expected a path string")
        output = None

    if problems:
        raise ConfigError(problems)
    return RunConfig(
        geometry=geometry,
        problem=problem,
        scheme=scheme_spec,
        quadrature=quadrature,
        window=window_cfg,
        solver=solver,
        experiment=experiment,
        output=output,
        raw=raw,
    )


def _pulse_forcing():
    def f1(x, y, t):
        return np.sin(np.pi * x) * (1.0 - y) * np.cos(2.0 * t) * np.ones_like(x * y)

    def f2(x, y, t):
        return 0.5 * np.sin(np.pi * x) * (1.0 + y) * np.cos(2.0 * t) * np.ones_like(x * y)

    return f1, f2


def _bump_initial():
    def u01(x, y):
        return np.sin(np.pi * x) * (1.0 - y)

    def u02(x, y):
        return 0.5 * np.sin(np.pi * x) * (1.0 + y)

    return u01, u02


def build_operators(cfg: RunConfig):
    """Mesh + assemble the configured problem; returns (ops, problem_spec)."""
    nx, ny = cfg.geometry["nx"], cfg.geometry["ny"]
    m1 = mesh.build_mesh(1, nx[0], ny[0])
    m2 = mesh.build_mesh(2, nx[1], ny[1])
    imap = mesh.match_interfaces(m1, m2)
    forcing = cfg.problem["forcing"]
    if forcing.startswith("mms:"):
        case = verify.mms_case(
            forcing[4:],
            nu=cfg.problem["nu"],
            B=cfg.problem["B"],
            advection=cfg.problem["advection"],
        )
        spec = case.problem
    else:
        f = _pulse_forcing() if forcing == "pulse" else (None, None)
        u0 = _bump_initial() if cfg.problem["initial"] == "bump" else (None, None)
        spec = fespace.ProblemSpec(
            nu=cfg.problem["nu"],
            advection=cfg.problem["advection"],
            B=cfg.problem["B"],
            f=f,
            g=(None, None),
            u0=u0,
        )
    return fespace.assemble(m1, m2, imap, spec), spec


def _simulate(cfg: RunConfig):
    ops, _ = build_operators(cfg)
    traj = coupling.run_simulation(
        ops,
        cfg.scheme,
        cfg.window,
        quadrature=cfg.quadrature,
        solver=cfg.solver["name"],
        fp_tol=cfg.solver["tol"],
        fp_max_iter=cfg.solver["max_iter"],
    )
    return ops, traj


def _cmd_run(cfg: RunConfig, outdir: Path) -> int:
    ops, traj = _simulate(cfg)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "trajectory.csv", "w") as fh:
        coupling.export_trajectory_csv(traj, ops, fh)
    summary = {
        "windows": cfg.window.N,
        "dt": cfg.window.dt,
        "scheme": cfg.scheme.name,
        "quadrature": cfg.quadrature,
        "solver": cfg.solver["name"],
        "final_energy": [
            0.5 * float(traj.windows[-1].U[i][-1] @ (ops.M[i] @ traj.windows[-1].U[i][-1]))
            for i in range(2)
        ],
        "d_omega": list(ops.d_omega),
        "d_gamma": ops.d_gamma,
        "step_restriction_ratio": coupling.step_restriction_ratio(cfg.window, ops.h),
    }
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {outdir / 'trajectory.csv'} and {outdir / 'summary.json'}")
    return EXIT_OK


def _level_worker(args):
    text, level = args
    cfg = parse_config(text)
    ops, _ = build_operators(cfg)
    base = cfg.window
    lvl_cfg = dataclasses.replace(base, N=base.N * 2**level)
    u0 = (
        verify.prepare_initial_state(ops, cfg.experiment["spin_up"])
        if cfg.experiment["spin_up"] > 0
        else None
    )
    oracle = verify.reference_solve(
        ops,
        base.t_f,
        cfg.experiment["oracle_steps"],
        scheme=cfg.experiment["oracle_scheme"],
        u0=u0,
    )
    traj = coupling.run_simulation(
        ops, cfg.scheme, lvl_cfg, quadrature=cfg.quadrature, solver=cfg.solver["name"], u0=u0
    )
    rep = verify.error_norms(ops, traj, oracle)
    errs = {
        "l2": rep.l2_total,
        "nodal": rep.nodal_max,
        "sync": rep.sync_max,
        "flux": rep.flux_total,
    }
    return level, lvl_cfg.dt, (lvl_cfg.dt_sub(0), lvl_cfg.dt_sub(1)), rep.l2, rep.sync_max, errs


def _cmd_convergence(cfg: RunConfig, text: str, outdir: Path, levels: int, jobs: int) -> int:
    outdir.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_level_worker, [(text, lvl) for lvl in range(levels)]))
        results.sort(key=lambda r: r[0])
        target = cfg.experiment["target"]
        rows, prev = [], None
        for level, dt, dts, l2, sync_max, errs in results:
            err = errs[target]
            running = float("nan") if prev is None or err <= 0 else float(np.log2(prev / err))
            rows.append(
                verify.RateRow(
                    level=level,
                    dt=dt,
                    dt_sub=dts,
                    err_l2=l2,
                    err_sync=sync_max,
                    err_target=err,
                    rate_running=running,
                    excluded=err < verify.ROUNDOFF_FLOOR,
                )
            )
            prev = err
        usable = [(np.log(r.dt), np.log(r.err_target)) for r in rows if not r.excluded and r.err_target > 0]
        slope = float(np.polyfit([p[0] for p in usable], [p[1] for p in usable], 1)[0]) if len(usable) >= 2 else float("nan")
        table = verify.RateTable(target=target, rows=rows, observed_rate=slope, notes=[])
    else:
        ops, _ = build_operators(cfg)
        table = verify.convergence_study(
            ops,
            cfg.scheme,
            cfg.window,
            levels,
            target=cfg.experiment["target"],
            quadrature=cfg.quadrature,
            solver=cfg.solver["name"],
            oracle_scheme=cfg.experiment["oracle_scheme"],
            oracle_steps=cfg.experiment["oracle_steps"],
            spin_up=cfg.experiment["spin_up"],
        )
    with open(outdir / "rates.csv", "w") as fh:
        table.write_csv(fh)
    for note in table.notes:
        print(f"note: {note}")
    print(f"observed {table.target} rate: {table.observed_rate:.3f}")
    print(f"wrote {outdir / 'rates.csv'}")
    return EXIT_OK


def _cmd_check(cfg: RunConfig, suite: str) -> int:
    try:
        ops, traj = _simulate(cfg)
    except (coupling.SolverError, coupling.ContractionError) as err:
        print(f"check {suite}: solver failure: {err}")
        return EXIT_FAIL
    if suite == "conservation":
        if not ops.conservation_compatible:
            print("check conservation: config error: coupling matrix/interface data "
                  "are not conservation compatible")
            return EXIT_CONFIG
        mode = "strong" if cfg.window.r[0] == cfg.window.r[1] else "weak"
        worst = 0.0
        for sol in traj.windows:
            rep = coupling.check_flux_conservation(sol, ops, mode)
            worst = max(worst, rep.relative)
        ok = worst <= 1e-11
        print(f"check conservation ({mode}): max relative residual {worst:.3e} -> "
              f"{'PASS' if ok else 'FAIL'}")
        return EXIT_OK if ok else EXIT_FAIL
    if suite == "energy":
        if ops.has_f or ops.has_g or not ops.b_psd:
            print("check energy: config error: requires zero forcing and "
                  "positive semidefinite coupling")
            return EXIT_CONFIG
        rep = verify.energy_report(traj, ops)
        worst_term = float(np.nanmax(rep.interfacial)) if len(rep.interfacial) else 0.0
        ok = rep.monotone and worst_term <= 1e-12 * max(rep.energies[0], 1e-300)
        print(
            f"check energy: monotone={rep.monotone}, max interfacial term "
            f"{worst_term:.3e} -> {'PASS' if ok else 'FAIL'}"
        )
        return EXIT_OK if ok else EXIT_FAIL
    print(f"unknown suite {suite!r}")
    return EXIT_CONFIG


def main(argv=None) -> int:
    level = os.environ.get("MRCOUPLE_LOG", "error").lower()
    logging.basicConfig(
        level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
            level, logging.ERROR
        )
    )
    parser = argparse.ArgumentParser(
        prog="mrcouple",
        description="Multirate coupling-window experiments for two coupled "
        "advection-diffusion subdomains.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a single simulation")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default="out")
    p_conv = sub.add_parser("convergence", help="run a window-refinement study")
    p_conv.add_argument("--config", required=True)
    p_conv.add_argument("--out", default="out")
    p_conv.add_argument("--levels", type=int, default=None)
    p_conv.add_argument("--jobs", type=int, default=1)
    p_check = sub.add_parser("check", help="run a property suite")
    p_check.add_argument("--config", required=True)
    p_check.add_argument("--suite", required=True, choices=("conservation", "energy"))
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text()
    except OSError as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text)
    except ConfigError as err:
        for problem in err.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "run":
        return _cmd_run(cfg, Path(args.out))
    if args.command == "convergence":
        levels = args.levels if args.levels is not None else cfg.experiment["levels"]
        if levels < 3:
            print("config error: convergence needs at least 3 levels", file=sys.stderr)
            return EXIT_CONFIG
        return _cmd_convergence(cfg, text, Path(args.out), levels, args.jobs)
    return _cmd_check(cfg, args.suite)


def console() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console()
