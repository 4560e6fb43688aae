"""Coupling-window assembly, solvers, and the interface property checks.

Between two synchronization times the substeps of both subdomains and
the window-scale flux polynomials form one square linear system.  The
interface traces of the substep states are projected onto the window
polynomial space of order r_i; the fluxes are the coupling-matrix
combination of those projections.  The trace variables are eliminated
algebraically at assembly, so the monolithic unknowns are the substep
coefficients, the side values, and the flux modes (ordered last, so an
interface-reduced solver could be added without relayout).

Two solvers are provided: a sparse direct factorization of the window
system, reused across windows since the matrix does not change, and a
lagged fixed-point iteration that freezes the spatial operator and the
flux at the previous iterate.  The fixed point contracts only under a
time-step restriction; violations raise ContractionError with the
advisory restriction ratio dt * (1/h^2 + 1/h) attached.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import dgit
from .fespace import FeOperators
from .timepoly import (
    Interval,
    SchemeSpec,
    TimePoly,
    continuous_galerkin,
    gauss_on,
    legendre_table,
    points_for_degree,
    project_l2,
    project_l2_broken,
)

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    """Direct window solve failed (singular factorization or bad residual)."""


class ContractionError(RuntimeError):
    """The lagged window iteration failed to contract."""

    def __init__(self, message, *, iterations=0, factor=float("nan"), restriction_ratio=float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.factor = factor
        self.restriction_ratio = restriction_ratio


@dataclasses.dataclass(frozen=True)
class WindowConfig:
    """Multirate clock: N windows on (0, t_f), M_i substeps and flux order r_i."""

    t_f: float
    N: int
    M: tuple = (1, 1)
    r: tuple = (1, 1)
    N0: Optional[int] = None

    def __post_init__(self):
        if self.t_f <= 0:
            raise ValueError("final time must be positive")
        if self.N < 1 or self.M[0] < 1 or self.M[1] < 1:
            raise ValueError("window and substep counts must be at least 1")
        if self.r[0] < 0 or self.r[1] < 0:
            raise ValueError("flux orders must be nonnegative")
        if self.N0 is not None and self.N0 < 1:
            raise ValueError("initialization window count must be at least 1")

    @property
    def dt(self) -> float:
        return self.t_f / self.N

    def dt_sub(self, i: int) -> float:
        return self.dt / self.M[i]

    def sync_times(self) -> np.ndarray:
        return self.t_f * np.arange(self.N + 1) / self.N

    def window(self, n: int) -> Interval:
        """Coupling window n, 1-based."""
        return Interval(self.t_f * (n - 1) / self.N, self.t_f * n / self.N)

    def substep_edges(self, i: int, n: int) -> np.ndarray:
        w = self.window(n)
        return np.linspace(w.a, w.b, self.M[i] + 1)

    def n_init(self, spec: SchemeSpec) -> int:
        """Windows filled from reference data before the scheme takes over."""
        if self.N0 is not None:
            return self.N0
        return 1 if spec.k_s <= 1 else 2


@dataclasses.dataclass
class WindowSolution:
    """State of one solved coupling window."""

    index: int
    window: Interval
    u: tuple  # per subdomain: list of M_i substep TimePolys
    U: tuple  # per subdomain: (M_i + 1, d_i) side values, row 0 incoming
    F: tuple  # per subdomain: window flux TimePoly (d_gamma columns)
    traces: Optional[tuple] = None
    residual: float = float("nan")
    iterations: int = 0
    initialized_from_reference: bool = False

    def substeps(self, i: int) -> int:
        return len(self.u[i])


def step_restriction_ratio(cfg: WindowConfig, h: float) -> float:
    """Advisory solvability ratio dt * (h^-2 + h^-1) of the window iteration."""
    if h <= 0:
        raise ValueError("mesh parameter must be positive")
    return cfg.dt * (h**-2 + h**-1)


def _window_weights_trapezoid(edges: np.ndarray, window: Interval, r: int) -> np.ndarray:
    """w[n, p] = average of window mode p at the endpoints of substep n."""
    tab = legendre_table(r, window.to_reference(edges))  # (r+1, M+1)
    return 0.5 * (tab[:, :-1] + tab[:, 1:]).T  # (M, r+1)


def trace_projection(
    substeps: Sequence[TimePoly],
    window: Interval,
    r: int,
    *,
    mode: str = "exact",
) -> TimePoly:
    """Project broken substep traces onto the window polynomial space.

    exact mode is the L2 projection of the piecewise polynomial; the
    endpoint-average mode replaces each substep integral on the right side
    by dt_i * (average of values) * (average of test mode), matching the
    quadrature with which the classical q=1 scheme is derived.
    """
    if mode == "exact":
        out = project_l2_broken(list(substeps), r)
        if not out.interval.close_to(window):
            raise ValueError("substeps do not tile the window")
        return out
    edges = np.array([p.interval.a for p in substeps] + [substeps[-1].interval.b])
    weights = _window_weights_trapezoid(edges, window, r)  # (M, r+1)
    ncols = substeps[0].ncols
    coeffs = np.zeros((r + 1, ncols))
    for n, piece in enumerate(substeps):
        avg = 0.5 * (piece.left() + piece.right())
        dt_i = piece.interval.length
        for p in range(r + 1):
            coeffs[p] += dt_i * weights[n, p] * avg
    for p in range(r + 1):
        coeffs[p] *= (2 * p + 1) / window.length
    return TimePoly(window, coeffs)


def flux_solve(
    u_g1: TimePoly,
    u_g2: TimePoly,
    B: np.ndarray,
    r: tuple,
    g: tuple = (None, None),
) -> tuple:
    """Window fluxes from the projected traces: F_i = Pi_{r_i}(B-combination - g_i).

    g_i, when present, is the trace-space representation of the interface
    data as a TimePoly on the same window.  Modes of a trace beyond its
    own order contribute nothing, so with equal orders and row-wise
    antisymmetric B the two fluxes cancel identically.
    """
    window = u_g1.interval
    ncols = u_g1.ncols
    B = np.asarray(B, dtype=float)
    out = []
    for i in range(2):
        coeffs = np.zeros((r[i] + 1, ncols))
        for j, ug in enumerate((u_g1, u_g2)):
            upto = min(r[i], ug.order)
            coeffs[: upto + 1] += B[i, j] * ug.coeffs[: upto + 1]
        if g[i] is not None:
            gi = project_l2(g[i], window, r[i]) if not isinstance(g[i], TimePoly) else g[i]
            upto = min(r[i], gi.order)
            coeffs[: upto + 1] -= gi.coeffs[: upto + 1]
        out.append(TimePoly(window, coeffs))
    return tuple(out)


def _g_moments(
    ops: FeOperators,
    i: int,
    window: Interval,
    r_i: int,
    edges: np.ndarray,
    quadrature: str,
    npts: int = dgit.LOAD_QUAD_PTS,
) -> np.ndarray:
    """Moments of the interface data against the window test modes, (r_i+1, d_gamma)."""
    d_gamma = ops.d_gamma
    out = np.zeros((r_i + 1, d_gamma))
    if ops.load_g[i] is None:
        return out
    if quadrature == "trapezoid":
        weights = _window_weights_trapezoid(edges, window, r_i)
        gvals = np.stack([ops.g_vec(i, t) for t in edges])
        avg = 0.5 * (gvals[:-1] + gvals[1:])
        dt_i = edges[1] - edges[0]
        for p in range(r_i + 1):
            out[p] = dt_i * (weights[:, p] @ avg)
        return out
    t, w = gauss_on(window, npts)
    tab = legendre_table(r_i, window.to_reference(t))
    gvals = np.stack([ops.g_vec(i, ti) for ti in t])
    for p in range(r_i + 1):
        out[p] = (w * tab[p]) @ gvals
    return out


class WindowOperator:
    """Monolithic window system; assembled once, factorized once, reused per window.

    Unknown layout: substep groups of both subdomains (each substep holds
    its modal coefficients then its side value), then the flux modes of
    subdomain 1, then subdomain 2.
    """

    def __init__(
        self,
        ops: FeOperators,
        spec: SchemeSpec,
        cfg: WindowConfig,
        *,
        quadrature: str = "exact",
        keep_traces: bool = False,
    ):
        if quadrature not in ("exact", "trapezoid"):
            raise ValueError(f"unknown quadrature {quadrature!r}")
        self.ops, self.spec, self.cfg = ops, spec, cfg
        self.quadrature = quadrature
        self.keep_traces = keep_traces
        q = spec.q
        d = ops.d_omega
        dG = ops.d_gamma
        self._sub_size = tuple((q + 2) * d[i] for i in range(2))
        self._dom_off = (0, cfg.M[0] * self._sub_size[0])
        self._flux_off = (
            self._dom_off[1] + cfg.M[1] * self._sub_size[1],
            self._dom_off[1] + cfg.M[1] * self._sub_size[1] + (cfg.r[0] + 1) * dG,
        )
        self.dim = self._flux_off[1] + (cfg.r[1] + 1) * dG

        # Template window: geometry is shared by every window.
        self._template = cfg.window(1)
        self.blocks = []
        for i in range(2):
            edges = cfg.substep_edges(i, 1)
            self.blocks.append(
                [
                    dgit.assemble_substep(
                        ops,
                        i,
                        spec,
                        Interval(edges[n], edges[n + 1]),
                        cfg.r[i],
                        self._template,
                        quadrature=quadrature,
                    )
                    for n in range(cfg.M[i])
                ]
            )
        self.matrix = self._assemble_matrix()
        try:
            self._lu = spla.splu(self.matrix.tocsc())
        except RuntimeError as err:
            raise SolverError(f"window factorization failed: {err}") from err
        self._matrix_norm = spla.norm(self.matrix, np.inf) if self.dim else 0.0

    # -- unknown offsets -------------------------------------------------
    def _sub_off(self, i: int, n: int) -> int:
        """Column of substep n (1-based) of subdomain i."""
        return self._dom_off[i] + (n - 1) * self._sub_size[i]

    def _U_off(self, i: int, n: int) -> int:
        return self._sub_off(i, n) + (self.spec.q + 1) * self.ops.d_omega[i]

    def _assemble_matrix(self) -> sp.csr_matrix:
        q = self.spec.q
        d = self.ops.d_omega
        dG = self.ops.d_gamma
        cfg = self.cfg
        rows, cols, data = [], [], []

        def put(block, r0, c0):
            if block is None:
                return
            b = sp.coo_matrix(block)
            rows.extend(b.row + r0)
            cols.extend(b.col + c0)
            data.extend(b.data)

        for i in range(2):
            for n in range(1, cfg.M[i] + 1):
                blk = self.blocks[i][n - 1]
                r0 = self._sub_off(i, n)
                put(blk.matrix, r0, r0)
                for j, prevj in enumerate(blk.prev):
                    target = n - 1 - j
                    if target >= 1:
                        put(prevj, r0, self._U_off(i, target))
                if blk.flux is not None:
                    put(blk.flux, r0, self._flux_off[i])

        # Flux definition rows: window mass times flux modes minus the
        # projected trace combination of both subdomains.
        window = self._template
        for i in range(2):
            r_i = cfg.r[i]
            base = self._flux_off[i]
            for p in range(r_i + 1):
                put(
                    (window.length / (2 * p + 1)) * self.ops.M_gamma,
                    base + p * dG,
                    base + p * dG,
                )
            for j in range(2):
                bij = self.ops.B[i, j]
                if bij == 0.0 or dG == 0:
                    continue
                MgT = (self.ops.M_gamma @ self.ops.T[j]).tocsr()
                r_cut = min(r_i, cfg.r[j])  # trace of subdomain j has order r_j
                edges = cfg.substep_edges(j, 1)
                if self.quadrature == "trapezoid":
                    weights = _window_weights_trapezoid(edges, window, r_cut)
                    dt_j = edges[1] - edges[0]
                    for n in range(1, cfg.M[j] + 1):
                        for p in range(r_cut + 1):
                            wcoef = -bij * dt_j * 0.5 * weights[n - 1, p]
                            put(wcoef * MgT, base + p * dG, self._U_off(j, n))
                            if n >= 2:
                                put(wcoef * MgT, base + p * dG, self._U_off(j, n - 1))
                            # the n=1 backward value is the incoming state (rhs)
                else:
                    for n in range(1, cfg.M[j] + 1):
                        sub = Interval(edges[n - 1], edges[n])
                        X = dgit.cross_gram(sub, window, q, r_cut)  # (q+1, r_cut+1)
                        c0 = self._sub_off(j, n)
                        for p in range(r_cut + 1):
                            for a in range(q + 1):
                                put(
                                    -bij * X[a, p] * MgT,
                                    base + p * dG,
                                    c0 + a * d[j],
                                )
        mat = sp.coo_matrix(
            (data, (np.asarray(rows), np.asarray(cols))), shape=(self.dim, self.dim)
        )
        return mat.tocsr()

    def _rhs(self, incoming, histories, window_index: int) -> np.ndarray:
        ops, spec, cfg = self.ops, self.spec, self.cfg
        d = ops.d_omega
        dG = ops.d_gamma
        rhs = np.zeros(self.dim)
        window = cfg.window(window_index)
        for i in range(2):
            edges = cfg.substep_edges(i, window_index)
            hist = [np.asarray(incoming[i], dtype=float)] + list(histories[i])
            load = (lambda t, i=i: ops.f_vec(i, t)) if ops.load_f[i] is not None else None
            for n in range(1, cfg.M[i] + 1):
                blk = self.blocks[i][n - 1]
                r0 = self._sub_off(i, n)
                iv = Interval(edges[n - 1], edges[n])
                rhs[r0 : r0 + self._sub_size[i]] += dgit.load_moments(
                    spec, iv, load, d[i], quadrature=self.quadrature
                )
                for j, prevj in enumerate(blk.prev):
                    target = n - 1 - j
                    if target >= 1 or not prevj.nnz:
                        continue
                    if -target >= len(hist):
                        raise ValueError(
                            f"window needs {-target + 1} historic side values, have {len(hist)}"
                        )
                    rhs[r0 : r0 + self._sub_size[i]] -= prevj @ hist[-target]
        for i in range(2):
            base = self._flux_off[i]
            gm = _g_moments(ops, i, window, cfg.r[i], cfg.substep_edges(i, window_index), self.quadrature)
            for p in range(cfg.r[i] + 1):
                rhs[base + p * dG : base + (p + 1) * dG] -= gm[p]
            if self.quadrature == "trapezoid" and dG:
                for j in range(2):
                    bij = ops.B[i, j]
                    if bij == 0.0:
                        continue
                    MgT = ops.M_gamma @ ops.T[j]
                    r_cut = min(cfg.r[i], cfg.r[j])
                    edges = cfg.substep_edges(j, 1)
                    weights = _window_weights_trapezoid(edges, self._template, r_cut)
                    dt_j = edges[1] - edges[0]
                    v = MgT @ np.asarray(incoming[j], dtype=float)
                    for p in range(r_cut + 1):
                        rhs[base + p * dG : base + (p + 1) * dG] += (
                            bij * dt_j * 0.5 * weights[0, p] * v
                        )
        return rhs

    def solve(self, incoming, histories=((), ()), window_index: int = 1) -> WindowSolution:
        """Direct monolithic solve of one window."""
        rhs = self._rhs(incoming, histories, window_index)
        x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError("window factorization produced non-finite values")
        res = self.matrix @ x - rhs
        scale = max(float(np.linalg.norm(rhs)), float(np.linalg.norm(self.matrix @ x)), 1e-300)
        rel = float(np.linalg.norm(res)) / scale
        if rel > RESIDUAL_TOL:
            raise SolverError(f"window solve residual {rel:.3e} exceeds {RESIDUAL_TOL:.1e}")
        return self._extract(x, incoming, window_index, residual=rel)

    def _extract(self, x, incoming, window_index, residual, iterations=0) -> WindowSolution:
        ops, spec, cfg = self.ops, self.spec, self.cfg
        q = spec.q
        d = ops.d_omega
        dG = ops.d_gamma
        window = cfg.window(window_index)
        u, U, F = [], [], []
        for i in range(2):
            edges = cfg.substep_edges(i, window_index)
            polys = []
            side = np.empty((cfg.M[i] + 1, d[i]))
            side[0] = incoming[i]
            for n in range(1, cfg.M[i] + 1):
                off = self._sub_off(i, n)
                coeffs = x[off : off + (q + 1) * d[i]].reshape(q + 1, d[i])
                polys.append(TimePoly(Interval(edges[n - 1], edges[n]), coeffs))
                side[n] = x[self._U_off(i, n) : self._U_off(i, n) + d[i]]
            u.append(polys)
            U.append(side)
            if dG:
                off = self._flux_off[i]
                fc = x[off : off + (cfg.r[i] + 1) * dG].reshape(cfg.r[i] + 1, dG)
                F.append(TimePoly(window, fc))
            else:
                F.append(None)
        traces = None
        if self.keep_traces and dG:
            traces = tuple(
                trace_projection(
                    [TimePoly(p.interval, (ops.T[i] @ p.coeffs.T).T) for p in u[i]],
                    window,
                    cfg.r[i],
                    mode="exact" if self.quadrature == "exact" else "trapezoid",
                )
                for i in range(2)
            )
        for side in U:
            side.flags.writeable = False
        return WindowSolution(
            index=window_index,
            window=window,
            u=tuple(u),
            U=tuple(U),
            F=tuple(F),
            traces=traces,
            residual=residual,
            iterations=iterations,
        )


def assemble_window(
    ops: FeOperators,
    spec: SchemeSpec,
    cfg: WindowConfig,
    *,
    quadrature: str = "exact",
    keep_traces: bool = False,
) -> WindowOperator:
    """Build the monolithic window system (matrix shared by all windows)."""
    return WindowOperator(ops, spec, cfg, quadrature=quadrature, keep_traces=keep_traces)


def solve_window_direct(
    op: WindowOperator, incoming, histories=((), ()), window_index: int = 1
) -> WindowSolution:
    return op.solve(incoming, histories, window_index)


def solve_window_fixed_point(
    ops: FeOperators,
    spec: SchemeSpec,
    cfg: WindowConfig,
    incoming,
    histories=((), ()),
    window_index: int = 1,
    *,
    quadrature: str = "exact",
    tol: float = 1e-10,
    max_iter: int = 200,
    flux_guess=None,
) -> WindowSolution:
    """Lagged window iteration: frozen operator and flux on the right side.

    Each pass sweeps the substeps of both subdomains with only the
    time-derivative structure on the left, then refreshes the traces and
    fluxes from the new states.  Terminates when the composite update norm
    sum_i sum_n (|||du|||^2 + dt_i |dU|^2) drops below tol^2; sustained
    growth raises ContractionError carrying the advisory restriction ratio.
    """
    d = ops.d_omega
    dG = ops.d_gamma
    q = spec.q
    window = cfg.window(window_index)
    M_gamma_lu = spla.splu(ops.M_gamma.tocsc()) if (dG and ops.has_g) else None

    blocks, flux_tables, TtMg = [], [], []
    for i in range(2):
        edges = cfg.substep_edges(i, window_index)
        blocks.append(
            [
                dgit.assemble_substep(
                    ops,
                    i,
                    spec,
                    Interval(edges[n], edges[n + 1]),
                    cfg.r[i],
                    window,
                    quadrature=quadrature,
                    lag_operator=True,
                )
                for n in range(cfg.M[i])
            ]
        )
        # one factorization serves every substep of the subdomain
        shared = blocks[i][0].lu()
        for blk in blocks[i][1:]:
            blk._lu = shared
        TtMg.append((ops.T[i].T @ ops.M_gamma).tocsr() if dG else None)
        flux_tables.append(None)

    # initial guesses: constant states at the incoming values, given flux
    u_prev = [
        [
            TimePoly(
                Interval(e[n], e[n + 1]),
                np.vstack([np.asarray(incoming[i], dtype=float)] + [np.zeros(d[i])] * q),
            )
            for n in range(cfg.M[i])
        ]
        for i, e in ((0, cfg.substep_edges(0, window_index)), (1, cfg.substep_edges(1, window_index)))
    ]
    if flux_guess is not None:
        F_prev = [TimePoly(window, np.asarray(fg.coeffs, dtype=float)) for fg in flux_guess]
    else:
        F_prev = [TimePoly(window, np.zeros((cfg.r[i] + 1, max(dG, 1)))) for i in range(2)]
        if dG == 0:
            F_prev = [TimePoly(window, np.zeros((cfg.r[i] + 1, 1))) for i in range(2)]

    U_prev = [np.tile(np.asarray(incoming[i], dtype=float), (cfg.M[i] + 1, 1)) for i in range(2)]
    deltas = []
    for it in range(1, max_iter + 1):
        u_new, U_new = [], []
        delta_sq = 0.0
        for i in range(2):
            hist_tail = list(histories[i])
            polys = []
            side = np.empty((cfg.M[i] + 1, d[i]))
            side[0] = incoming[i]
            load = (lambda t, i=i: ops.f_vec(i, t)) if ops.load_f[i] is not None else None
            for n in range(1, cfg.M[i] + 1):
                blk = blocks[i][n - 1]
                extra = blk.lagged_operator_rhs(u_prev[i][n - 1].coeffs)
                history = [side[k] for k in range(n - 1, -1, -1)] + hist_tail
                fmodes = F_prev[i].coeffs if dG else None
                poly, Un = dgit.solve_substep(
                    blk, history, flux_modes=fmodes, load_fn=load, extra_rhs=extra
                )
                polys.append(poly)
                side[n] = Un
                diff = poly - u_prev[i][n - 1]
                delta_sq += diff.l2_norm_sq(ops.M[i])
                dU = Un - U_prev[i][n]
                delta_sq += cfg.dt_sub(i) * float(dU @ (ops.M[i] @ dU))
            u_new.append(polys)
            U_new.append(side)

        if dG:
            mode = "exact" if quadrature == "exact" else "trapezoid"
            traces = [
                trace_projection(
                    [TimePoly(p.interval, (ops.T[i] @ p.coeffs.T).T) for p in u_new[i]],
                    window,
                    cfg.r[i],
                    mode=mode,
                )
                for i in range(2)
            ]
            g_repr = [None, None]
            if ops.has_g:
                for i in range(2):
                    gm = _g_moments(
                        ops, i, window, cfg.r[i], cfg.substep_edges(i, window_index), quadrature
                    )
                    coeffs = np.stack(
                        [
                            (2 * p + 1) / window.length * M_gamma_lu.solve(gm[p])
                            for p in range(cfg.r[i] + 1)
                        ]
                    )
                    g_repr[i] = TimePoly(window, coeffs)
            F_new = list(flux_solve(traces[0], traces[1], ops.B, cfg.r, tuple(g_repr)))
        else:
            F_new = F_prev

        u_prev, U_prev, F_prev = u_new, U_new, F_new
        deltas.append(math.sqrt(delta_sq))
        if deltas[-1] <= tol:
            Fs = tuple(F_new[i] if dG else None for i in range(2))
            for side in U_new:
                side.flags.writeable = False
            return WindowSolution(
                index=window_index,
                window=window,
                u=tuple(tuple(p for p in u_new[i]) for i in range(2)),
                U=tuple(U_new),
                F=Fs,
                residual=deltas[-1],
                iterations=it,
            )
        if len(deltas) >= 4 and deltas[-1] > deltas[-2] > deltas[-3] and deltas[-1] > 10 * deltas[0]:
            factor = deltas[-1] / deltas[-2]
            raise ContractionError(
                f"window iteration diverging (update growth factor {factor:.3f} after {it} sweeps)",
                iterations=it,
                factor=factor,
                restriction_ratio=step_restriction_ratio(cfg, ops.h),
            )
    factor = deltas[-1] / deltas[-2] if len(deltas) >= 2 and deltas[-2] > 0 else float("nan")
    raise ContractionError(
        f"window iteration did not reach tol={tol:g} in {max_iter} sweeps "
        f"(last update {deltas[-1]:.3e})",
        iterations=max_iter,
        factor=factor,
        restriction_ratio=step_restriction_ratio(cfg, ops.h),
    )


# ---------------------------------------------------------------------------
# Property checks.


@dataclasses.dataclass(frozen=True)
class ConservationReport:
    mode: str
    residual: float
    scale: float

    @property
    def relative(self) -> float:
        return self.residual / self.scale if self.scale > 0 else 0.0


def check_flux_conservation(sol: WindowSolution, ops: FeOperators, mode: str = "strong") -> ConservationReport:
    """Residual of the flux cancellation identity on one window.

    strong compares the flux polynomials coefficientwise (requires equal
    orders); weak tests the sum against window polynomials up to the
    smaller order; cn tests the endpoint-average sums of the classical
    q=1 quadrature against constants.
    """
    if not ops.conservation_compatible:
        raise ValueError(
            "flux conservation requires row-wise antisymmetric coupling "
            "(B[0,:] = -B[1,:]) and opposite interface data (g1 = -g2)"
        )
    F1, F2 = sol.F
    if F1 is None or F2 is None:
        return ConservationReport(mode, 0.0, 0.0)
    scale = float(np.max(np.abs(F1.coeffs))) if F1.coeffs.size else 0.0
    if mode == "strong":
        if F1.order != F2.order:
            raise ValueError("strong conservation is defined for equal flux orders")
        residual = float(np.max(np.abs(F1.coeffs + F2.coeffs)))
        return ConservationReport(mode, residual, scale)
    if mode == "weak":
        s = min(F1.order, F2.order)
        dt = sol.window.length
        worst = 0.0
        ref = 0.0
        for p in range(s + 1):
            m1 = dt / (2 * p + 1) * (ops.M_gamma @ F1.coeffs[p])
            m2 = dt / (2 * p + 1) * (ops.M_gamma @ F2.coeffs[p])
            worst = max(worst, float(np.max(np.abs(m1 + m2))))
            ref = max(ref, float(np.max(np.abs(m1))))
        return ConservationReport(mode, worst, ref)
    if mode == "cn":
        total = np.zeros(ops.d_gamma)
        ref = 0.0
        for i, F in enumerate((F1, F2)):
            vals = np.stack([F(p.interval.a) for p in sol.u[i]] + [F(sol.u[i][-1].interval.b)])
            avg = 0.5 * (vals[:-1] + vals[1:])
            part = (sol.u[i][0].interval.length) * avg.sum(axis=0)
            total += ops.M_gamma @ part
            ref = max(ref, float(np.max(np.abs(ops.M_gamma @ part))))
        return ConservationReport(mode, float(np.max(np.abs(total))), ref)
    raise ValueError(f"unknown conservation mode {mode!r}")


def interfacial_energy_term(sol: WindowSolution, ops: FeOperators, mode: str = "exact") -> float:
    """Interface work term of one window; nonpositive for semidefinite coupling.

    exact mode integrates -(F_i, u_i) over every substep; cn mode uses the
    endpoint-average sums of the classical q=1 quadrature.
    """
    if ops.has_g:
        raise ValueError("interfacial energy sign requires zero interface data")
    if not ops.b_psd:
        raise ValueError("interfacial energy sign requires positive semidefinite coupling")
    if ops.d_gamma == 0:
        return 0.0
    total = 0.0
    for i in range(2):
        F = sol.F[i]
        if mode == "cn":
            for n, piece in enumerate(sol.u[i]):
                dt_i = piece.interval.length
                u_avg = 0.5 * (sol.U[i][n] + sol.U[i][n + 1])
                f_avg = 0.5 * (F(piece.interval.a) + F(piece.interval.b))
                total -= dt_i * float((ops.T[i] @ u_avg) @ (ops.M_gamma @ f_avg))
        elif mode == "exact":
            for piece in sol.u[i]:
                npts = points_for_degree(piece.order + F.order)
                t, w = gauss_on(piece.interval, npts)
                for tk, wk in zip(t, w):
                    total -= wk * float((ops.T[i] @ piece(tk)) @ (ops.M_gamma @ F(tk)))
        else:
            raise ValueError(f"unknown energy mode {mode!r}")
    return total


# ---------------------------------------------------------------------------
# Coupled single-system form and the simulation driver.


def coupled_system(ops: FeOperators):
    """Fold the interface condition into one block system M u' = -L u + b(t).

    Returns (M, L, load, slices); load is None when the problem has no data.
    Useful for reference solves and for single-rate comparisons.
    """
    d1, d2 = ops.d_omega
    M = sp.block_diag(ops.M, format="csr")
    grid = [[ops.L[0].tolil(), sp.lil_matrix((d1, d2))], [sp.lil_matrix((d2, d1)), ops.L[1].tolil()]]
    if ops.d_gamma:
        for i in range(2):
            for j in range(2):
                if ops.B[i, j] == 0.0:
                    continue
                grid[i][j] = grid[i][j] + ops.B[i, j] * (ops.T[i].T @ ops.M_gamma @ ops.T[j])
    Lc = sp.bmat(grid, format="csr")
    load = None
    if ops.has_f or ops.has_g:
        Tt = tuple(ops.T[i].T.tocsr() for i in range(2))

        def load(t: float) -> np.ndarray:
            parts = []
            for i in range(2):
                v = ops.f_vec(i, t)
                if ops.load_g[i] is not None:
                    v = v + Tt[i] @ ops.g_vec(i, t)
                parts.append(v)
            return np.concatenate(parts)

    return M, Lc, load, (slice(0, d1), slice(d1, d1 + d2))


@dataclasses.dataclass
class Trajectory:
    """Sequentially solved windows plus the synchronized energy history."""

    windows: list
    sync_times: np.ndarray
    energies: np.ndarray
    spec: SchemeSpec
    cfg: WindowConfig
    quadrature: str
    solver: str

    @property
    def final_state(self):
        last = self.windows[-1]
        return tuple(last.U[i][-1] for i in range(2))


def _fill_init_windows(ops, spec, cfg, u0, n_init: int):
    """Solve the leading windows with a fine single-rate reference integrator.

    Supplies starting data for schemes whose side conditions reach further
    back than the available history; the substep states are exact broken
    projections of the reference solution.
    """
    Mc, Lc, load, (s1, s2) = coupled_system(ops)
    n_fine_per_sub = 32
    fine_per_window = n_fine_per_sub * cfg.M[0] * cfg.M[1]
    t_end = cfg.window(n_init - 1).b if n_init > 1 else 0.0
    edges = np.linspace(0.0, t_end, (n_init - 1) * fine_per_window + 1)
    polys, side = dgit.integrate(
        Mc, Lc, load, np.concatenate(u0), continuous_galerkin(2), edges
    )
    Mg_lu = spla.splu(ops.M_gamma.tocsc()) if (ops.d_gamma and ops.has_g) else None
    windows = []
    slices = (s1, s2)
    for w in range(1, n_init):
        window = cfg.window(w)
        u, U, F = [], [], []
        for i in range(2):
            sub_edges = cfg.substep_edges(i, w)
            per_sub = fine_per_window // cfg.M[i]
            polys_i, side_i = [], np.empty((cfg.M[i] + 1, ops.d_omega[i]))
            side_i[0] = side[(w - 1) * fine_per_window][slices[i]]
            for n in range(cfg.M[i]):
                lo = (w - 1) * fine_per_window + n * per_sub
                pieces = [
                    TimePoly(polys[k].interval, polys[k].coeffs[:, slices[i]])
                    for k in range(lo, lo + per_sub)
                ]
                proj = project_l2_broken(pieces, spec.q)
                polys_i.append(TimePoly(Interval(sub_edges[n], sub_edges[n + 1]), proj.coeffs))
                side_i[n + 1] = side[lo + per_sub][slices[i]]
            u.append(polys_i)
            U.append(side_i)
        for i in range(2):
            if ops.d_gamma:
                lo = (w - 1) * fine_per_window
                combo = []
                for k in range(lo, lo + fine_per_window):
                    c1 = (ops.T[0] @ polys[k].coeffs[:, s1].T).T
                    c2 = (ops.T[1] @ polys[k].coeffs[:, s2].T).T
                    combo.append(
                        TimePoly(polys[k].interval, ops.B[i, 0] * c1 + ops.B[i, 1] * c2)
                    )
                Fi = project_l2_broken(combo, cfg.r[i])
                if ops.has_g:
                    gtilde = project_l2(
                        lambda t, i=i: Mg_lu.solve(ops.g_vec(i, t)), window, cfg.r[i], npts=16
                    )
                    Fi = Fi - gtilde
                F.append(TimePoly(window, Fi.coeffs))
            else:
                F.append(None)
        for side in U:
            side.flags.writeable = False
        windows.append(
            WindowSolution(
                index=w,
                window=window,
                u=tuple(u),
                U=tuple(U),
                F=tuple(F),
                initialized_from_reference=True,
            )
        )
    return windows


def run_simulation(
    ops: FeOperators,
    spec: SchemeSpec,
    cfg: WindowConfig,
    *,
    quadrature: str = "exact",
    solver: str = "direct",
    u0=None,
    keep_traces: bool = False,
    fp_tol: float = 1e-10,
    fp_max_iter: int = 200,
) -> Trajectory:
    """March the coupled problem through all windows sequentially."""
    if solver not in ("direct", "fixed-point"):
        raise ValueError(f"unknown solver {solver!r}")
    u0 = tuple(np.asarray(v, dtype=float) for v in (u0 if u0 is not None else ops.u0))
    n_init = cfg.n_init(spec)
    if n_init > cfg.N:
        raise ValueError(
            f"{n_init - 1} initialization windows leave no scheme window (N={cfg.N})"
        )
    if n_init > 1:
        for i in range(2):
            if spec.k_s > cfg.M[i] + 1:
                raise ValueError("side conditions reach back beyond one window of history")
    if solver == "fixed-point":
        log.info(
            "fixed-point solver selected; step restriction ratio dt*(1/h^2+1/h) = %.3e",
            step_restriction_ratio(cfg, ops.h),
        )

    windows = list(_fill_init_windows(ops, spec, cfg, u0, n_init)) if n_init > 1 else []
    op = (
        WindowOperator(ops, spec, cfg, quadrature=quadrature, keep_traces=keep_traces)
        if solver == "direct"
        else None
    )

    histories = ([], [])
    incoming = u0
    if windows:
        last = windows[-1]
        incoming = tuple(last.U[i][-1] for i in range(2))
        histories = tuple(
            [last.U[i][n] for n in range(last.substeps(i) - 1, -1, -1)][: max(spec.k_s, 1)]
            for i in range(2)
        )
    flux_guess = windows[-1].F if windows and windows[-1].F[0] is not None else None

    for n in range(n_init, cfg.N + 1):
        try:
            if solver == "direct":
                sol = op.solve(incoming, histories, n)
            else:
                sol = solve_window_fixed_point(
                    ops,
                    spec,
                    cfg,
                    incoming,
                    histories,
                    n,
                    quadrature=quadrature,
                    tol=fp_tol,
                    max_iter=fp_max_iter,
                    flux_guess=flux_guess,
                )
        except ContractionError as err:
            raise ContractionError(
                f"window {n}: {err}",
                iterations=err.iterations,
                factor=err.factor,
                restriction_ratio=err.restriction_ratio,
            ) from err
        except SolverError as err:
            raise SolverError(f"window {n}: {err}") from err
        windows.append(sol)
        incoming = tuple(sol.U[i][-1] for i in range(2))
        histories = tuple(
            (
                [sol.U[i][k] for k in range(sol.substeps(i) - 1, -1, -1)]
                + list(histories[i])
            )[: max(spec.k_s - 1, 1)]
            for i in range(2)
        )
        if sol.F[0] is not None:
            flux_guess = sol.F

    sync = cfg.sync_times()
    energies = np.empty(cfg.N + 1)
    energies[0] = ops.energy(u0[0], u0[1])
    for n, sol in enumerate(windows, start=1):
        energies[n] = ops.energy(sol.U[0][-1], sol.U[1][-1])
    return Trajectory(windows, sync, energies, spec, cfg, quadrature, solver)


def export_trajectory_csv(traj: Trajectory, ops: FeOperators, stream) -> None:
    """Per-window energy and interface diagnostics, 17 significant digits."""
    cons_mode = "strong" if traj.cfg.r[0] == traj.cfg.r[1] else "weak"
    energy_mode = "cn" if traj.quadrature == "trapezoid" else "exact"
    can_cons = ops.conservation_compatible and ops.d_gamma > 0
    can_energy = (not ops.has_g) and ops.b_psd and ops.d_gamma > 0

    def fmt(x: float) -> str:
        return f"{x:.17g}"

    stream.write("window,t_sync,energy_1,energy_2,flux_conservation_residual,interfacial_energy_term\n")
    e1_0 = 0.5 * float(traj.windows[0].U[0][0] @ (ops.M[0] @ traj.windows[0].U[0][0]))
    e2_0 = 0.5 * float(traj.windows[0].U[1][0] @ (ops.M[1] @ traj.windows[0].U[1][0]))
    stream.write(f"0,{fmt(traj.sync_times[0])},{fmt(e1_0)},{fmt(e2_0)},nan,nan\n")
    for n, sol in enumerate(traj.windows, start=1):
        e1 = 0.5 * float(sol.U[0][-1] @ (ops.M[0] @ sol.U[0][-1]))
        e2 = 0.5 * float(sol.U[1][-1] @ (ops.M[1] @ sol.U[1][-1]))
        cons = (
            fmt(check_flux_conservation(sol, ops, cons_mode).relative) if can_cons else "nan"
        )
        energy = fmt(interfacial_energy_term(sol, ops, energy_mode)) if can_energy else "nan"
        stream.write(f"{n},{fmt(traj.sync_times[n])},{fmt(e1)},{fmt(e2)},{cons},{energy}\n")
