"""Single-substep time-Galerkin blocks and a sequential integrator.

A substep holds one polynomial state of order q plus one end-of-step
side value, constrained by n_s pointwise side conditions and by
variational rows tested against polynomials of order q + 1 - n_s; row
and unknown counts both equal (q + 2) * d.  Blocks are plain sparse
matrices so a coupling-window assembler can stack them, and they can be
solved standalone (sequentially) for single-system integration.

Quadrature of the data terms is switchable between exact Gauss rules
and endpoint-trapezoid evaluation; the latter turns the pinned-endpoint
q=1 scheme into classical Crank-Nicolson.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .timepoly import (
    Interval,
    SchemeSpec,
    TimePoly,
    derivative_overlap,
    gauss_on,
    legendre_table,
    points_for_degree,
)

LOAD_QUAD_PTS = 8


def _empty(rows: int, cols: int) -> sp.csr_matrix:
    return sp.csr_matrix((rows, cols))


def cross_gram(sub: Interval, window: Interval, order_sub: int, order_win: int) -> np.ndarray:
    """X[a, b] = integral over the substep of P_a(substep) * P_b(window) dt.

    Couples window-scale flux modes to substep-scale test and trial modes;
    the Gauss rule is exact for the polynomial integrand.
    """
    t, w = gauss_on(sub, points_for_degree(order_sub + order_win))
    tab_s = legendre_table(order_sub, sub.to_reference(t))
    tab_w = legendre_table(order_win, window.to_reference(t))
    return (tab_s * w) @ tab_w.T


def cross_gram_trapezoid(
    sub: Interval, window: Interval, order_sub: int, order_win: int
) -> np.ndarray:
    """Endpoint-average variant of cross_gram.

    Replaces the substep integral by dt/2 * [value(a) + value(b)]; equal to
    the exact table whenever the integrand has degree <= 1, in particular
    for constant test modes against window modes of order <= 1.
    """
    ends = np.array([sub.a, sub.b])
    tab_s = legendre_table(order_sub, sub.to_reference(ends))
    tab_w = legendre_table(order_win, window.to_reference(ends))
    return 0.5 * sub.length * (tab_s @ tab_w.T)


def load_moments(
    spec: SchemeSpec,
    interval: Interval,
    load_fn: Optional[Callable],
    d: int,
    *,
    quadrature: str = "exact",
    npts: int = LOAD_QUAD_PTS,
) -> np.ndarray:
    """Data term of one substep: integral of load(t) against each test mode.

    Laid out like the substep rows (side rows zero, then one d-slab per
    test mode).  Trapezoid quadrature uses endpoint values only, which is
    the classical treatment of forcing data for the pinned-endpoint q=1
    scheme.
    """
    q, t_o = spec.q, spec.test_order
    rhs = np.zeros((q + 2) * d)
    if load_fn is None:
        return rhs
    base = spec.n_s * d
    if quadrature == "trapezoid":
        fa = np.asarray(load_fn(interval.a), dtype=float)
        fb = np.asarray(load_fn(interval.b), dtype=float)
        for m in range(t_o + 1):
            sign = -1.0 if m % 2 else 1.0
            rhs[base + m * d : base + (m + 1) * d] = 0.5 * interval.length * (sign * fa + fb)
        return rhs
    t, w = gauss_on(interval, npts)
    tab = legendre_table(t_o, interval.to_reference(t))
    vals = np.stack([np.asarray(load_fn(ti), dtype=float) for ti in t])
    for m in range(t_o + 1):
        rhs[base + m * d : base + (m + 1) * d] = (w * tab[m]) @ vals
    return rhs


@dataclasses.dataclass
class SubstepBlock:
    """Linear rows of one substep, keyed to the unknowns [c_0..c_q, U].

    matrix couples the substep's own unknowns; prev[j] the side value
    j+1 steps back; flux the window-scale flux modes (empty if there is
    no interface).  Rows are ordered side conditions first, variational
    rows after, (q + 2) * d in total.
    """

    spec: SchemeSpec
    interval: Interval
    window: Interval
    d: int
    d_gamma: int
    r: Optional[int]
    quadrature: str
    matrix: sp.csr_matrix
    prev: list
    flux: Optional[sp.csr_matrix]
    lag_operator: bool = False
    _L: Optional[sp.csr_matrix] = None
    _K_L: Optional[np.ndarray] = None
    _lu: object = dataclasses.field(default=None, repr=False)

    @property
    def n_side_rows(self) -> int:
        return self.spec.n_s * self.d

    def load_moments(self, load_fn: Optional[Callable], npts: int = LOAD_QUAD_PTS) -> np.ndarray:
        """RHS vector of the data term, integrated against each test mode."""
        return load_moments(
            self.spec, self.interval, load_fn, self.d, quadrature=self.quadrature, npts=npts
        )

    def lagged_operator_rhs(self, coeffs: np.ndarray) -> np.ndarray:
        """-integral of L(u_prev, v) dt for a frozen previous iterate.

        Only meaningful for blocks built with lag_operator=True; coeffs is
        the previous iterate's (q+1, d) modal array.
        """
        if not self.lag_operator:
            raise ValueError("block was not built with a lagged operator")
        q, t_o, d = self.spec.q, self.spec.test_order, self.d
        rhs = np.zeros((q + 2) * d)
        base = self.n_side_rows
        for m in range(min(q, t_o) + 1):
            rhs[base + m * d : base + (m + 1) * d] = -self._K_L[m, m] * (self._L @ coeffs[m])
        return rhs

    def lu(self):
        if self._lu is None:
            self._lu = spla.splu(self.matrix.tocsc())
        return self._lu


def build_substep_block(
    M: sp.spmatrix,
    L: Optional[sp.spmatrix],
    spec: SchemeSpec,
    interval: Interval,
    *,
    window: Optional[Interval] = None,
    r: Optional[int] = None,
    TtMg: Optional[sp.spmatrix] = None,
    quadrature: str = "exact",
    lag_operator: bool = False,
) -> SubstepBlock:
    """Assemble the rows of one substep for a system with mass M and operator L.

    TtMg is the premultiplied trace coupling T^t M_gamma; when given together
    with a flux order r, the block carries columns for the (r+1) window-scale
    flux modes.  With lag_operator=True the L term is left off the matrix and
    applied through lagged_operator_rhs instead.
    """
    if quadrature not in ("exact", "trapezoid"):
        raise ValueError(f"unknown quadrature {quadrature!r}")
    if r is not None and r < 0:
        raise ValueError("flux order must be nonnegative")
    q, n_s, t_o = spec.q, spec.n_s, spec.test_order
    d = M.shape[0]
    dt = interval.length
    window = window or interval
    I_d = sp.identity(d, format="csr")

    # Side rows: values of the modal expansion at the side nodes vs side values.
    if n_s:
        x = 2.0 * np.asarray(spec.thetas) - 1.0
        Psi = legendre_table(q, x).T  # (n_s, q+1)
        side_c = sp.kron(Psi, I_d)
        side_U = sp.kron(-spec.D[:, :1], I_d)
    else:
        side_c = _empty(0, (q + 1) * d)
        side_U = _empty(0, d)

    # Variational rows: mass/derivative structure, operator term, U coupling.
    G = derivative_overlap(q, t_o)  # (q+1, t_o+1)
    K_M = -G.T  # (t_o+1, q+1)
    K_L = np.zeros((t_o + 1, q + 1))
    for m in range(min(q, t_o) + 1):
        K_L[m, m] = dt / (2 * m + 1)
    var_c = sp.kron(K_M, M)
    if L is not None and not lag_operator:
        var_c = var_c + sp.kron(K_L, L)
    var_U = sp.kron(np.ones((t_o + 1, 1)), M)

    matrix = sp.bmat([[side_c, side_U], [var_c, var_U]], format="csr")

    # Couplings to earlier side values; index j reaches back j+1 steps.
    alt = np.array([[-((-1.0) ** m)] for m in range(t_o + 1)])
    prev = []
    n_back = max(spec.k_s, 1)
    for j in range(n_back):
        l = j + 1  # column of D coupling U^{n-l}
        side_part = (
            sp.kron(-spec.D[:, l : l + 1], I_d)
            if n_s and l < spec.D.shape[1]
            else _empty(n_s * d, d)
        )
        var_part = sp.kron(alt, M) if j == 0 else _empty((t_o + 1) * d, d)
        prev.append(sp.vstack([side_part, var_part], format="csr"))

    flux = None
    d_gamma = 0
    if TtMg is not None and r is not None and TtMg.shape[1] > 0:
        d_gamma = TtMg.shape[1]
        if quadrature == "trapezoid":
            Xf = cross_gram_trapezoid(interval, window, t_o, r)
        else:
            Xf = cross_gram(interval, window, t_o, r)
        # flux modes enter the variational rows on the left side
        flux = sp.vstack(
            [_empty(n_s * d, (r + 1) * d_gamma), sp.kron(Xf, TtMg)], format="csr"
        )

    return SubstepBlock(
        spec=spec,
        interval=interval,
        window=window,
        d=d,
        d_gamma=d_gamma,
        r=r,
        quadrature=quadrature,
        matrix=matrix,
        prev=prev,
        flux=flux,
        lag_operator=lag_operator,
        _L=L.tocsr() if (lag_operator and L is not None) else None,
        _K_L=K_L if lag_operator else None,
    )


def assemble_substep(
    ops,
    i: int,
    spec: SchemeSpec,
    interval: Interval,
    r_i: int,
    window: Interval,
    *,
    quadrature: str = "exact",
    lag_operator: bool = False,
) -> SubstepBlock:
    """Substep block for subdomain i of an assembled operator set."""
    TtMg = (ops.T[i].T @ ops.M_gamma).tocsr() if ops.d_gamma else None
    return build_substep_block(
        ops.M[i],
        ops.L[i],
        spec,
        interval,
        window=window,
        r=r_i,
        TtMg=TtMg,
        quadrature=quadrature,
        lag_operator=lag_operator,
    )


def cn_substep(ops, i: int, interval: Interval, window: Interval, r_i: int) -> SubstepBlock:
    """Classical Crank-Nicolson step: pinned endpoints, endpoint-trapezoid data."""
    from .timepoly import crank_nicolson

    return assemble_substep(
        ops, i, crank_nicolson(), interval, r_i, window, quadrature="trapezoid"
    )


def solve_substep(
    block: SubstepBlock,
    history: Sequence[np.ndarray],
    flux_modes: Optional[np.ndarray] = None,
    load_fn: Optional[Callable] = None,
    *,
    extra_rhs: Optional[np.ndarray] = None,
    load_npts: int = LOAD_QUAD_PTS,
):
    """Solve one substep given its trailing side values (newest first).

    flux_modes, when present, has shape (r+1, d_gamma) and is treated as
    known data.  Returns the state polynomial and the new side value.
    """
    rhs = block.load_moments(load_fn, npts=load_npts)
    if extra_rhs is not None:
        rhs = rhs + extra_rhs
    for j, blockj in enumerate(block.prev):
        if j < len(history):
            rhs -= blockj @ history[j]
        elif blockj.nnz:
            raise ValueError(f"substep reaches back {j + 1} side values, history has {len(history)}")
    if block.flux is not None and flux_modes is not None:
        rhs -= block.flux @ np.asarray(flux_modes, dtype=float).ravel()
    x = block.lu().solve(rhs)
    q, d = block.spec.q, block.d
    coeffs = x[: (q + 1) * d].reshape(q + 1, d)
    U = x[(q + 1) * d :]
    return TimePoly(block.interval, coeffs), U


def side_condition_residual(
    spec: SchemeSpec, poly: TimePoly, side_values: Sequence[np.ndarray]
) -> float:
    """Max violation of the side conditions; side_values = [U^n, U^{n-1}, ...]."""
    worst = 0.0
    times = spec.side_times(poly.interval)
    for k in range(spec.n_s):
        target = np.zeros(poly.ncols)
        for l in range(spec.k_s + 1):
            if l < len(side_values):
                target += spec.D[k, l] * side_values[l]
        worst = max(worst, float(np.max(np.abs(poly(times[k]) - target))))
    return worst


def integrate(
    M: sp.spmatrix,
    L: Optional[sp.spmatrix],
    load_fn: Optional[Callable],
    u0: np.ndarray,
    spec: SchemeSpec,
    boundaries: np.ndarray,
    *,
    quadrature: str = "exact",
    history0: Optional[Sequence[np.ndarray]] = None,
    load_npts: int = LOAD_QUAD_PTS,
):
    """March a single linear system M u' = -L u + load through time steps.

    boundaries are the step edges; a uniform grid reuses one factorization.
    Returns (polys, side_values) with side_values[n] the state at
    boundaries[n] (side_values[0] = u0).
    """
    boundaries = np.asarray(boundaries, dtype=float)
    n_steps = len(boundaries) - 1
    history = list(history0 or [])
    history.insert(0, np.asarray(u0, dtype=float))
    polys = []
    side_values = [history[0]]
    block = None
    block_dt = None
    for n in range(n_steps):
        iv = Interval(boundaries[n], boundaries[n + 1])
        if block is None or abs(iv.length - block_dt) > 1e-12 * max(1.0, iv.length):
            block = build_substep_block(M, L, spec, iv, quadrature=quadrature)
            block_dt = iv.length
        else:
            block = dataclasses.replace(
                block, interval=iv, window=iv, _lu=block._lu
            )
        poly, U = solve_substep(block, history, load_fn=load_fn, load_npts=load_npts)
        polys.append(poly)
        side_values.append(U)
        history.insert(0, U)
        del history[max(spec.k_s, 1) + 1 :]
    return polys, np.stack(side_values)
