"""Manufactured solutions, overkill reference solves, and rate estimation.

Temporal convergence is measured against the semi-discrete solution of
the same spatial system, so spatial discretization error cancels by
construction: the reference is a single-rate, exactly-coupled solve with
a tiny step.  Initialization windows, when a scheme needs them, are
filled from the same reference, so starting errors sit far below the
measured ones.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional

import numpy as np
import scipy.sparse.linalg as spla
import sympy

from . import dgit
from .coupling import Trajectory, WindowConfig, coupled_system, run_simulation
from .fespace import AdvectionSpec, FeOperators, ProblemSpec
from .timepoly import SchemeSpec, crank_nicolson, dg, gauss_on

ROUNDOFF_FLOOR = 1e-12


def _wrap_xy_t(fn) -> Callable:
    def call(x, y, t):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast(x, y, np.asarray(t, dtype=float)).shape
        out = np.asarray(fn(x, y, t), dtype=float)
        return np.broadcast_to(out, shape).copy() if out.shape != shape else out

    return call


def _wrap_x_t(fn) -> Callable:
    def call(x, t):
        x = np.asarray(x, dtype=float)
        shape = np.broadcast(x, np.asarray(t, dtype=float)).shape
        out = np.asarray(fn(x, t), dtype=float)
        return np.broadcast_to(out, shape).copy() if out.shape != shape else out

    return call


@dataclasses.dataclass
class ManufacturedCase:
    """Exact solution pair plus the forcings that make it solve the model."""

    name: str
    problem: ProblemSpec
    exact: tuple  # u_i(x, y, t)
    residual: tuple  # pointwise PDE residual per subdomain (should vanish)
    temporal_degree: Optional[int]  # None for non-polynomial time dependence


_MMS_FORMS = {
    # (expression for u1, expression for u2) as strings over x, y, t
    "smooth": (
        "sin(pi*x)*(1 - y)*(1 + y/2)*exp(-t)",
        "sin(pi*x)*(1 + y)*(1 - y/2)*exp(-t)",
    ),
    "antisym": (
        "sin(pi*x)*(1 - y)*(y + 1/2)*exp(-t)",
        "-sin(pi*x)*(1 + y)*(1/2 - y)*exp(-t)",
    ),
    "polyt": (
        "sin(pi*x)*(1 - y)*(1 + y/2)*(1 + t/2)",
        "sin(pi*x)*(1 + y)*(1 - y/2)*(1 + t/2)",
    ),
}


def mms_case(
    name: str,
    *,
    nu: tuple = (1.0, 0.5),
    B=None,
    advection: tuple = (AdvectionSpec(), AdvectionSpec()),
) -> ManufacturedCase:
    """Build a manufactured case: body and interface forcings derived symbolically.

    The interface data follows from the flux condition rearranged for g_i,
    using the outward normal of each subdomain at the interface.
    """
    if name not in _MMS_FORMS:
        raise ValueError(f"unknown manufactured preset {name!r}; have {sorted(_MMS_FORMS)}")
    if B is None:
        B = np.array([[1.0, -1.0], [-1.0, 1.0]])
    B = np.asarray(B, dtype=float).reshape(2, 2)
    x, y, t = sympy.symbols("x y t", real=True)
    u_sym = [sympy.sympify(s, locals={"x": x, "y": y, "t": t}) for s in _MMS_FORMS[name]]

    s_sym = []
    for i in range(2):
        adv = advection[i]
        if adv.kind == "zero":
            s_sym.append((sympy.Integer(0), sympy.Integer(0)))
        elif adv.kind == "constant":
            s_sym.append((sympy.Float(adv.sx), sympy.Integer(0)))
        else:
            a = sympy.Float(adv.amplitude)
            psi = a * x * (1 - x) * y * (1 - y) if i == 0 else a * x * (1 - x) * y * (1 + y)
            s_sym.append((sympy.diff(psi, y), -sympy.diff(psi, x)))

    f_fns, g_fns, u0_fns, u_fns, res_fns = [], [], [], [], []
    normals = (-1, 1)  # outward y-component at the interface, per subdomain
    for i in range(2):
        u = u_sym[i]
        sx, sy = s_sym[i]
        flux_div = sympy.diff(nu[i] * sympy.diff(u, x) - sx * u, x) + sympy.diff(
            nu[i] * sympy.diff(u, y) - sy * u, y
        )
        f = sympy.diff(u, t) - flux_div
        g = (
            B[i, 0] * u_sym[0] + B[i, 1] * u_sym[1] + nu[i] * normals[i] * sympy.diff(u, y)
        ).subs(y, 0)
        u_fns.append(_wrap_xy_t(sympy.lambdify((x, y, t), u, "numpy")))
        f_fns.append(_wrap_xy_t(sympy.lambdify((x, y, t), f, "numpy")))
        g_fns.append(_wrap_x_t(sympy.lambdify((x, t), sympy.simplify(g), "numpy")))
        u0_expr = u.subs(t, 0)
        u0_fns.append(
            (lambda fn: (lambda xx, yy: fn(xx, yy, 0.0)))(u_fns[-1])
        )
        # residual evaluated from independently lambdified pieces
        ut = _wrap_xy_t(sympy.lambdify((x, y, t), sympy.diff(u, t), "numpy"))
        fd = _wrap_xy_t(sympy.lambdify((x, y, t), flux_div, "numpy"))
        ff = f_fns[-1]
        res_fns.append(
            (lambda ut, fd, ff: (lambda xx, yy, tt: ut(xx, yy, tt) - fd(xx, yy, tt) - ff(xx, yy, tt)))(
                ut, fd, ff
            )
        )

    deg = None
    if all(u.is_polynomial(t) for u in u_sym):
        deg = max(int(sympy.degree(u, t)) for u in u_sym)
    problem = ProblemSpec(
        nu=tuple(nu),
        advection=tuple(advection),
        B=B,
        f=tuple(f_fns),
        g=tuple(g_fns),
        u0=tuple(u0_fns),
    )
    return ManufacturedCase(
        name=name,
        problem=problem,
        exact=tuple(u_fns),
        residual=tuple(res_fns),
        temporal_degree=deg,
    )


def residual_check(case: ManufacturedCase, n: int = 20, seed: int = 7) -> float:
    """Max pointwise model residual of the manufactured pair at random points."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(2):
        xx = rng.uniform(0.05, 0.95, n)
        yy = rng.uniform(0.05, 0.95, n) * (1.0 if i == 0 else -1.0)
        tt = rng.uniform(0.0, 1.0, n)
        worst = max(worst, float(np.max(np.abs(case.residual[i](xx, yy, tt)))))
    return worst


# ---------------------------------------------------------------------------
# Overkill reference trajectories.


@dataclasses.dataclass
class ReferenceTrajectory:
    """Dense single-rate solve of the exactly-coupled system, queryable in time."""

    boundaries: np.ndarray
    polys: list
    slices: tuple
    ops: FeOperators
    scheme_name: str
    _mg_lu: object = dataclasses.field(default=None, repr=False)

    def _index(self, t: float) -> int:
        idx = int(np.searchsorted(self.boundaries, t, side="right")) - 1
        return min(max(idx, 0), len(self.polys) - 1)

    def state(self, t: float) -> tuple:
        v = self.polys[self._index(t)](t)
        return v[self.slices[0]], v[self.slices[1]]

    def flux(self, i: int, t: float) -> np.ndarray:
        """Pointwise interface flux of the reference solution."""
        u1, u2 = self.state(t)
        ops = self.ops
        out = ops.B[i, 0] * (ops.T[0] @ u1) + ops.B[i, 1] * (ops.T[1] @ u2)
        if ops.load_g[i] is not None:
            if self._mg_lu is None:
                self._mg_lu = spla.splu(ops.M_gamma.tocsc())
            out = out - self._mg_lu.solve(ops.g_vec(i, t))
        return out


def prepare_initial_state(
    ops: FeOperators, t_burn: float = 0.25, n_steps: int = 1024
) -> tuple:
    """Evolve the raw initial data through a fine burn-in ending at t = 0.

    Nodal interpolants generally sit off the slow manifold of the spatially
    discrete system; the resulting stiff transient (decay rates of order
    nu/h^2) swamps coarse-step temporal error measurements.  Running the
    overkill integrator over (-t_burn, 0) hands back initial data through
    which the semi-discrete solution is smooth in time, so measured rates
    reflect the scheme rather than the preparation of the data.
    """
    if t_burn <= 0:
        return tuple(np.asarray(v, dtype=float) for v in ops.u0)
    Mc, Lc, load, (s1, s2) = coupled_system(ops)
    edges = np.linspace(-t_burn, 0.0, n_steps + 1)
    _, side = dgit.integrate(
        Mc, Lc, load, np.concatenate(ops.u0), crank_nicolson(), edges, load_npts=4
    )
    return side[-1][s1], side[-1][s2]


def reference_solve(
    ops: FeOperators,
    t_f: float,
    n_steps: Optional[int] = None,
    *,
    scheme: str = "cn",
    u0=None,
) -> ReferenceTrajectory:
    """Single-rate overkill solve of the coupled system on (0, t_f).

    scheme "cn" uses the pinned-endpoint q=1 method with 2^12 steps per
    unit time by default; "dg2" the purely variational q=2 method with 2^9.
    """
    if scheme == "cn":
        sp_scheme = crank_nicolson()
        default = 2**12
    elif scheme == "dg2":
        sp_scheme = dg(2)
        default = 2**9
    else:
        raise ValueError(f"unknown reference scheme {scheme!r}")
    if n_steps is None:
        n_steps = max(64, int(round(default * t_f)))
    Mc, Lc, load, slices = coupled_system(ops)
    start = np.concatenate([np.asarray(v, dtype=float) for v in (u0 if u0 is not None else ops.u0)])
    boundaries = np.linspace(0.0, t_f, n_steps + 1)
    polys, _ = dgit.integrate(Mc, Lc, load, start, sp_scheme, boundaries, load_npts=4)
    return ReferenceTrajectory(boundaries, polys, slices, ops, scheme)


# ---------------------------------------------------------------------------
# Error norms and convergence studies.


@dataclasses.dataclass
class ErrorReport:
    """Errors of a multirate trajectory against a reference in the mass norm."""

    l2: tuple  # per-subdomain broken space-time L2 error
    nodal: tuple  # per-subdomain arrays of side-value errors at all substeps
    sync: np.ndarray  # combined side-value error at each synchronization time
    flux_l2: tuple  # per-subdomain L2-in-time flux error

    @property
    def l2_total(self) -> float:
        return math.sqrt(self.l2[0] ** 2 + self.l2[1] ** 2)

    @property
    def sync_max(self) -> float:
        return float(np.max(self.sync)) if len(self.sync) else 0.0

    @property
    def nodal_max(self) -> float:
        return max(
            (float(np.max(a)) if len(a) else 0.0) for a in self.nodal
        )

    @property
    def flux_total(self) -> float:
        return math.sqrt(self.flux_l2[0] ** 2 + self.flux_l2[1] ** 2)


def error_norms(ops: FeOperators, traj: Trajectory, oracle: ReferenceTrajectory) -> ErrorReport:
    """All error norms of a trajectory, skipping reference-filled windows."""
    q = traj.spec.q
    l2_sq = [0.0, 0.0]
    nodal = [[], []]
    sync = []
    flux_sq = [0.0, 0.0]
    for sol in traj.windows:
        if sol.initialized_from_reference:
            continue
        for i in range(2):
            for n, piece in enumerate(sol.u[i]):
                t, w = gauss_on(piece.interval, q + 4)
                for tk, wk in zip(t, w):
                    diff = piece(tk) - oracle.state(tk)[i]
                    l2_sq[i] += wk * float(diff @ (ops.M[i] @ diff))
                dU = sol.U[i][n + 1] - oracle.state(piece.interval.b)[i]
                nodal[i].append(ops.mass_norm(i, dU))
            if sol.F[i] is not None:
                F = sol.F[i]
                t, w = gauss_on(sol.window, F.order + 4)
                for tk, wk in zip(t, w):
                    diff = F(tk) - oracle.flux(i, tk)
                    flux_sq[i] += wk * float(diff @ (ops.M_gamma @ diff))
        end = sol.window.b
        sync.append(
            math.sqrt(
                sum(
                    ops.mass_norm(i, sol.U[i][-1] - oracle.state(end)[i]) ** 2 for i in range(2)
                )
            )
        )
    return ErrorReport(
        l2=tuple(math.sqrt(v) for v in l2_sq),
        nodal=tuple(np.asarray(v) for v in nodal),
        sync=np.asarray(sync),
        flux_l2=tuple(math.sqrt(v) for v in flux_sq),
    )


@dataclasses.dataclass
class RateRow:
    level: int
    dt: float
    dt_sub: tuple
    err_l2: tuple
    err_sync: float
    err_target: float
    rate_running: float
    excluded: bool = False


@dataclasses.dataclass
class RateTable:
    target: str
    rows: list
    observed_rate: float
    notes: list

    def write_csv(self, stream) -> None:
        stream.write("level,dt,dt1,dt2,err_l2_u1,err_l2_u2,err_sync,rate_running\n")
        for r in self.rows:
            stream.write(
                f"{r.level},{r.dt:.17g},{r.dt_sub[0]:.17g},{r.dt_sub[1]:.17g},"
                f"{r.err_l2[0]:.17g},{r.err_l2[1]:.17g},{r.err_sync:.17g},"
                f"{r.rate_running:.17g}\n"
            )


def convergence_study(
    ops: FeOperators,
    spec: SchemeSpec,
    base_cfg: WindowConfig,
    levels: int,
    *,
    target: str = "l2",
    quadrature: str = "exact",
    solver: str = "direct",
    oracle: Optional[ReferenceTrajectory] = None,
    oracle_scheme: str = "cn",
    oracle_steps: Optional[int] = None,
    u0=None,
    spin_up: float = 0.0,
) -> RateTable:
    """Halve the window size `levels - 1` times and fit the error decay rate.

    Substep counts and flux orders stay fixed, so the substep sizes halve
    with the window.  A positive spin_up replaces the initial data with the
    burn-in state of prepare_initial_state.  Levels whose error sits at the
    roundoff floor are excluded from the fit and noted.
    """
    if levels < 3:
        raise ValueError("a rate needs at least 3 refinement levels")
    if target not in ("l2", "nodal", "sync", "flux"):
        raise ValueError(f"unknown study target {target!r}")
    if spin_up > 0.0:
        if u0 is not None:
            raise ValueError("pass either explicit initial data or spin_up, not both")
        u0 = prepare_initial_state(ops, spin_up)
    if oracle is None:
        oracle = reference_solve(
            ops, base_cfg.t_f, oracle_steps, scheme=oracle_scheme, u0=u0
        )
    rows, notes = [], []
    prev = None
    for lvl in range(levels):
        cfg = dataclasses.replace(base_cfg, N=base_cfg.N * 2**lvl)
        traj = run_simulation(
            ops, spec, cfg, quadrature=quadrature, solver=solver, u0=u0
        )
        rep = error_norms(ops, traj, oracle)
        err = {
            "l2": rep.l2_total,
            "nodal": rep.nodal_max,
            "sync": rep.sync_max,
            "flux": rep.flux_total,
        }[target]
        running = float("nan")
        if prev is not None and err > 0 and prev > 0:
            running = math.log2(prev / err)
        excluded = err < ROUNDOFF_FLOOR
        if excluded:
            notes.append(f"level {lvl}: error {err:.3e} at roundoff floor, excluded from fit")
        rows.append(
            RateRow(
                level=lvl,
                dt=cfg.dt,
                dt_sub=(cfg.dt_sub(0), cfg.dt_sub(1)),
                err_l2=rep.l2,
                err_sync=rep.sync_max,
                err_target=err,
                rate_running=running,
                excluded=excluded,
            )
        )
        prev = err
    fit = [(math.log(r.dt), math.log(r.err_target)) for r in rows if not r.excluded and r.err_target > 0]
    if len(fit) >= 2:
        xs = np.array([p[0] for p in fit])
        ys = np.array([p[1] for p in fit])
        slope = float(np.polyfit(xs, ys, 1)[0])
    else:
        slope = float("nan")
        notes.append("too few usable levels for a rate fit")
    return RateTable(target=target, rows=rows, observed_rate=slope, notes=notes)


@dataclasses.dataclass
class EnergyReport:
    energies: np.ndarray
    monotone: bool
    interfacial: np.ndarray
    tolerance: float


def energy_report(traj: Trajectory, ops: FeOperators) -> EnergyReport:
    """Energy history across synchronization times and the monotonicity verdict."""
    if ops.has_f or ops.has_g:
        raise ValueError("energy verdict requires zero body and interface forcing")
    from .coupling import interfacial_energy_term

    tol = 1e-12 * max(traj.energies[0], 0.0)
    monotone = bool(np.all(np.diff(traj.energies) <= tol))
    mode = "cn" if traj.quadrature == "trapezoid" else "exact"
    terms = []
    for sol in traj.windows:
        if ops.b_psd and ops.d_gamma:
            terms.append(interfacial_energy_term(sol, ops, mode))
        else:
            terms.append(float("nan"))
    return EnergyReport(traj.energies.copy(), monotone, np.asarray(terms), tol)
