"""Assembly of the spatial operators for the two coupled subdomains.

Produces, per subdomain: the mass matrix, the diffusion matrix, the
advection matrix in the divergence form b(v, w) = integral of
div(s v) * w, their sum L, the boolean trace restriction onto the
interface unknowns, and the interface mass matrix.  Homogeneous
Dirichlet conditions on the exterior boundary are imposed by dof
elimination, so the reduced mass matrices stay symmetric positive
definite.

Matrix terms use a 2x2 Gauss rule per element, which is exact for
bilinear elements and for the shipped advection presets (they are
polynomial by construction); load vectors use a 4x4 rule.  A backdoor
constructor accepts raw matrices so that small ODE systems can drive
the time integrators directly.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import InterfaceMap, Mesh

log = logging.getLogger(__name__)

N_GP_MATRIX = 2
N_GP_LOAD = 4

_SYM_TOL = 1e-12


def _gauss1d(n):
    return np.polynomial.legendre.leggauss(n)


def _shape_table(n_gp: int):
    """Bilinear shape values/derivatives at tensor Gauss points of [-1,1]^2."""
    x, w = _gauss1d(n_gp)
    XI, ETA = np.meshgrid(x, x, indexing="ij")
    xi, eta = XI.ravel(), ETA.ravel()
    W = np.outer(w, w).ravel()
    N = 0.25 * np.stack(
        [(1 - xi) * (1 - eta), (1 + xi) * (1 - eta), (1 + xi) * (1 + eta), (1 - xi) * (1 + eta)]
    )
    dNxi = 0.25 * np.stack([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
    dNeta = 0.25 * np.stack([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
    return xi, eta, W, N, dNxi, dNeta


@dataclasses.dataclass(frozen=True)
class AdvectionSpec:
    """Steady advection preset; all presets are divergence free.

    kind "zero", "constant" (field (sx, 0)), or "vortex" (curl of the
    polynomial streamfunction a * x(1-x) * y(1 -/+ y), which vanishes with
    zero tangential derivative on the whole subdomain boundary).
    """

    kind: str = "zero"
    sx: float = 0.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "vortex"):
            raise ValueError(f"unknown advection preset {self.kind!r}")

    def velocity(self, subdomain: int) -> Callable:
        if self.kind == "zero":
            return lambda x, y: (np.zeros_like(x), np.zeros_like(y))
        if self.kind == "constant":
            sx = self.sx
            return lambda x, y: (np.full_like(x, sx), np.zeros_like(y))
        a = self.amplitude
        if subdomain == 1:
            return lambda x, y: (a * x * (1 - x) * (1 - 2 * y), -a * (1 - 2 * x) * y * (1 - y))
        return lambda x, y: (a * x * (1 - x) * (1 + 2 * y), -a * (1 - 2 * x) * y * (1 + y))

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or (self.kind == "constant" and self.sx == 0.0)


def _b_flags(B: np.ndarray) -> tuple[bool, bool]:
    """(row-wise antisymmetry of B, positive semidefiniteness) flags."""
    scale = max(1.0, float(np.max(np.abs(B))))
    compatible = abs(B[0, 0] + B[1, 0]) <= 1e-14 * scale and abs(B[0, 1] + B[1, 1]) <= 1e-14 * scale
    sym = 0.5 * (B + B.T)
    psd = bool(np.min(np.linalg.eigvalsh(sym)) >= -1e-12 * scale)
    return compatible, psd


@dataclasses.dataclass(frozen=True)
class ProblemSpec:
    """Continuous model data for the coupled pair of advection-diffusion problems."""

    nu: tuple = (1.0, 1.0)
    advection: tuple = (AdvectionSpec(), AdvectionSpec())
    B: np.ndarray = dataclasses.field(default_factory=lambda: np.array([[1.0, -1.0], [-1.0, 1.0]]))
    f: tuple = (None, None)
    g: tuple = (None, None)
    u0: tuple = (None, None)
    conservation_compatible: bool = dataclasses.field(init=False)
    b_psd: bool = dataclasses.field(init=False)

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float).reshape(2, 2).copy()
        B.flags.writeable = False
        object.__setattr__(self, "B", B)
        if self.nu[0] <= 0 or self.nu[1] <= 0:
            raise ValueError("diffusivities must be positive")
        compat, psd = _b_flags(B)
        if compat and (self.g[0] is not None or self.g[1] is not None):
            g1 = self.g[0] or (lambda x, t: 0.0 * np.asarray(x, dtype=float))
            g2 = self.g[1] or (lambda x, t: 0.0 * np.asarray(x, dtype=float))
            xs = np.linspace(0.05, 0.95, 7)
            worst = ref = 0.0
            for t in (0.0, 0.31, 0.77):
                v1, v2 = np.asarray(g1(xs, t), dtype=float), np.asarray(g2(xs, t), dtype=float)
                worst = max(worst, float(np.max(np.abs(v1 + v2))))
                ref = max(ref, float(np.max(np.abs(v1))), 1.0)
            compat = worst <= 1e-10 * ref
        object.__setattr__(self, "conservation_compatible", compat)
        object.__setattr__(self, "b_psd", psd)


@dataclasses.dataclass
class FeOperators:
    """Assembled spatial operators shared by all time-integration machinery.

    load_f[i] maps t to the body-force vector (f_i, phi_j); load_g[i] maps
    t to the interface data vector (g_i, mu_j); None means identically zero.
    """

    M: tuple
    L: tuple
    T: tuple
    M_gamma: sp.csr_matrix
    B: np.ndarray
    A: tuple | None = None
    B_adv: tuple | None = None
    load_f: tuple = (None, None)
    load_g: tuple = (None, None)
    u0: tuple | None = None
    h: float = 1.0
    conservation_compatible: bool = True
    b_psd: bool = True
    meta: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self_d = tuple(m.shape[0] for m in self.M)
        for i in range(2):
            if self.L[i].shape != (self_d[i], self_d[i]):
                raise ValueError(f"L[{i}] shape {self.L[i].shape} != mass shape")
            if self.T[i].shape != (self.d_gamma, self_d[i]):
                raise ValueError(f"T[{i}] shape {self.T[i].shape} inconsistent with interface")
        if self.M_gamma.shape[0] != self.M_gamma.shape[1]:
            raise ValueError("interface mass must be square")
        if self.u0 is None:
            self.u0 = tuple(np.zeros(d) for d in self_d)
        for i in range(2):
            if len(self.u0[i]) != self_d[i]:
                raise ValueError(f"u0[{i}] has wrong length")
        self.B = np.asarray(self.B, dtype=float).reshape(2, 2)

    @property
    def d_omega(self) -> tuple:
        return tuple(m.shape[0] for m in self.M)

    @property
    def d_gamma(self) -> int:
        return self.M_gamma.shape[0]

    @property
    def has_f(self) -> bool:
        return any(fn is not None for fn in self.load_f)

    @property
    def has_g(self) -> bool:
        return any(fn is not None for fn in self.load_g)

    def f_vec(self, i: int, t: float) -> np.ndarray:
        fn = self.load_f[i]
        return np.zeros(self.d_omega[i]) if fn is None else np.asarray(fn(t), dtype=float)

    def g_vec(self, i: int, t: float) -> np.ndarray:
        fn = self.load_g[i]
        return np.zeros(self.d_gamma) if fn is None else np.asarray(fn(t), dtype=float)

    def mass_norm(self, i: int, v: np.ndarray) -> float:
        return float(np.sqrt(max(0.0, v @ (self.M[i] @ v))))

    def energy(self, U1: np.ndarray, U2: np.ndarray) -> float:
        return 0.5 * float(U1 @ (self.M[0] @ U1)) + 0.5 * float(U2 @ (self.M[1] @ U2))


def local_mass(hx: float, hy: float) -> np.ndarray:
    """Element mass matrix of a hx-by-hy bilinear quad."""
    _, _, W, N, _, _ = _shape_table(N_GP_MATRIX)
    detj = hx * hy / 4.0
    return detj * (N * W) @ N.T


def local_stiffness(hx: float, hy: float, nu: float = 1.0) -> np.ndarray:
    """Element diffusion matrix; its rows sum to zero (constants in the kernel)."""
    _, _, W, _, dNxi, dNeta = _shape_table(N_GP_MATRIX)
    detj = hx * hy / 4.0
    gx, gy = (2.0 / hx) * dNxi, (2.0 / hy) * dNeta
    return nu * detj * ((gx * W) @ gx.T + (gy * W) @ gy.T)


def _assemble_domain(mesh: Mesh, nu: float, adv: AdvectionSpec):
    """(M, A, B_adv) on the free dofs of one subdomain."""
    xi, eta, W, N, dNxi, dNeta = _shape_table(N_GP_MATRIX)
    hx, hy = mesh.hx, mesh.hy
    detj = hx * hy / 4.0
    gx, gy = (2.0 / hx) * dNxi, (2.0 / hy) * dNeta
    m_loc = local_mass(hx, hy)
    a_loc = local_stiffness(hx, hy, nu)
    velocity = adv.velocity(mesh.subdomain)

    n_free = mesh.n_free
    rows, cols, m_vals, a_vals, b_vals = [], [], [], [], []
    for quad in mesh.quads:
        dofs = mesh.free_dof[quad]
        x0, y0 = mesh.nodes[quad[0]]
        if adv.is_zero:
            b_loc = np.zeros((4, 4))
        else:
            xg = x0 + hx * (1 + xi) / 2.0
            yg = y0 + hy * (1 + eta) / 2.0
            sx, sy = velocity(xg, yg)
            # divergence form: rows test, cols trial; all presets have div s = 0
            conv = sx * gx + sy * gy
            b_loc = detj * (N * W) @ conv.T
        for a_ in range(4):
            ia = dofs[a_]
            if ia < 0:
                continue
            for b_ in range(4):
                ib = dofs[b_]
                if ib < 0:
                    continue
                rows.append(ia)
                cols.append(ib)
                m_vals.append(m_loc[a_, b_])
                a_vals.append(a_loc[a_, b_])
                b_vals.append(b_loc[a_, b_])

    shape = (n_free, n_free)
    M = sp.coo_matrix((m_vals, (rows, cols)), shape=shape).tocsr()
    A = sp.coo_matrix((a_vals, (rows, cols)), shape=shape).tocsr()
    B_adv = sp.coo_matrix((b_vals, (rows, cols)), shape=shape).tocsr()
    return M, A, B_adv


def _interface_mass(mesh: Mesh, imap: InterfaceMap) -> sp.csr_matrix:
    """1D mass matrix of the interface trace space (zero at the endpoints)."""
    d_gamma = imap.d_gamma
    if d_gamma == 0:
        return sp.csr_matrix((0, 0))
    hx = mesh.hx
    slot = {int(n): k for k, n in enumerate(mesh.interface_nodes)}
    loc = (hx / 6.0) * np.array([[2.0, 1.0], [1.0, 2.0]])
    rows, cols, vals = [], [], []
    iy = 0 if mesh.subdomain == 1 else mesh.ny
    for ix in range(mesh.nx):
        na = iy * (mesh.nx + 1) + ix
        nb = na + 1
        for a_, nid in enumerate((na, nb)):
            ka = slot.get(int(nid), -1)
            if ka < 0:
                continue
            for b_, njd in enumerate((na, nb)):
                kb = slot.get(int(njd), -1)
                if kb < 0:
                    continue
                rows.append(ka)
                cols.append(kb)
                vals.append(loc[a_, b_])
    return sp.coo_matrix((vals, (rows, cols)), shape=(d_gamma, d_gamma)).tocsr()


def _volume_load(mesh: Mesh, f: Callable) -> Callable:
    """t -> vector of (f(., t), phi_j) over the free dofs."""
    xi, eta, W, N, _, _ = _shape_table(N_GP_LOAD)
    hx, hy = mesh.hx, mesh.hy
    detj = hx * hy / 4.0
    origins = mesh.nodes[mesh.quads[:, 0]]
    XG = origins[:, :1] + hx * (1 + xi)[None, :] / 2.0  # (nel, ngp)
    YG = origins[:, 1:] + hy * (1 + eta)[None, :] / 2.0
    dofs = mesh.free_dof[mesh.quads].ravel()  # (nel*4,)
    valid = dofs >= 0
    idx = dofs[valid]
    NW = N * W  # (4, ngp)
    n_free = mesh.n_free

    def load(t: float) -> np.ndarray:
        fvals = np.asarray(f(XG, YG, t), dtype=float)
        contrib = detj * fvals @ NW.T  # (nel, 4)
        out = np.zeros(n_free)
        np.add.at(out, idx, contrib.ravel()[valid])
        return out

    return load


def _interface_load(mesh: Mesh, imap: InterfaceMap, g: Callable) -> Callable:
    """t -> vector of (g(., t), mu_j) over the interface unknowns."""
    x1, w1 = _gauss1d(N_GP_LOAD)
    hx = mesh.hx
    iy = 0 if mesh.subdomain == 1 else mesh.ny
    left = iy * (mesh.nx + 1) + np.arange(mesh.nx)
    slot = np.full(len(mesh.nodes), -1, dtype=int)
    slot[mesh.interface_nodes] = np.arange(imap.d_gamma)
    seg_slots = np.stack([slot[left], slot[left + 1]])  # (2, nseg)
    valid = seg_slots >= 0
    idx = seg_slots[valid]
    XG = np.arange(mesh.nx)[:, None] * hx + hx * (1 + x1)[None, :] / 2.0  # (nseg, ngp)
    SW = np.stack([(1 - x1) / 2.0, (1 + x1) / 2.0]) * w1  # (2, ngp)
    d_gamma = imap.d_gamma

    def load(t: float) -> np.ndarray:
        gvals = np.asarray(g(XG, t), dtype=float)
        contrib = (hx / 2.0) * gvals @ SW.T  # (nseg, 2)
        out = np.zeros(d_gamma)
        np.add.at(out, idx, contrib.T[valid])
        return out

    return load


def assemble(mesh1: Mesh, mesh2: Mesh, imap: InterfaceMap, spec: ProblemSpec) -> FeOperators:
    """Assemble all spatial operators for a matched mesh pair."""
    meshes = (mesh1, mesh2)
    M, A, B_adv, L, T, u0 = [], [], [], [], [], []
    for i, mesh in enumerate(meshes):
        Mi, Ai, Bi = _assemble_domain(mesh, spec.nu[i], spec.advection[i])
        M.append(Mi)
        A.append(Ai)
        B_adv.append(Bi)
        L.append((Ai + Bi).tocsr())
        dofs = imap.dofs_1 if i == 0 else imap.dofs_2
        Ti = sp.coo_matrix(
            (np.ones(len(dofs)), (np.arange(len(dofs)), dofs)),
            shape=(imap.d_gamma, mesh.n_free),
        ).tocsr()
        T.append(Ti)
        if spec.u0[i] is not None:
            free_nodes = np.flatnonzero(mesh.free_dof >= 0)
            xy = mesh.nodes[free_nodes]
            u0.append(np.asarray(spec.u0[i](xy[:, 0], xy[:, 1]), dtype=float))
        else:
            u0.append(np.zeros(mesh.n_free))
        peclet = _cell_peclet(mesh, spec.nu[i], spec.advection[i])
        if peclet > 2.0:
            log.info("subdomain %d: cell Peclet number %.2f (advection-dominated)", i + 1, peclet)

    M_gamma = _interface_mass(mesh1, imap)
    load_f = tuple(
        _volume_load(meshes[i], spec.f[i]) if spec.f[i] is not None else None for i in range(2)
    )
    load_g = tuple(
        _interface_load(meshes[i], imap, spec.g[i]) if spec.g[i] is not None else None
        for i in range(2)
    )
    return FeOperators(
        M=tuple(M),
        L=tuple(L),
        T=tuple(T),
        M_gamma=M_gamma,
        B=spec.B,
        A=tuple(A),
        B_adv=tuple(B_adv),
        load_f=load_f,
        load_g=load_g,
        u0=tuple(u0),
        h=max(mesh1.h, mesh2.h),
        conservation_compatible=spec.conservation_compatible,
        b_psd=spec.b_psd,
        meta={"nx": (mesh1.nx, mesh2.nx), "ny": (mesh1.ny, mesh2.ny)},
    )


def _cell_peclet(mesh: Mesh, nu: float, adv: AdvectionSpec) -> float:
    if adv.is_zero:
        return 0.0
    xs = np.linspace(0, 1, 9)
    ys = np.linspace(0, 1, 9) if mesh.subdomain == 1 else np.linspace(-1, 0, 9)
    X, Y = np.meshgrid(xs, ys)
    sx, sy = adv.velocity(mesh.subdomain)(X, Y)
    smax = float(np.max(np.hypot(sx, sy)))
    return smax * max(mesh.hx, mesh.hy) / (2.0 * nu)


def _check_spd(name: str, mat) -> None:
    dense = mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)
    if dense.size == 0:
        return
    if np.max(np.abs(dense - dense.T)) > _SYM_TOL * max(1.0, np.max(np.abs(dense))):
        raise ValueError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(dense)
    except np.linalg.LinAlgError as err:
        raise ValueError(f"{name} is not positive definite") from err


def from_matrices(
    M1,
    L1,
    T1,
    M2,
    L2,
    T2,
    M_gamma,
    B,
    *,
    load_f=(None, None),
    load_g=(None, None),
    u0=None,
    h: float = 1.0,
) -> FeOperators:
    """Matrix-defined backdoor for toy systems; bypasses any mesh.

    Mass matrices (volume and interface) must be symmetric positive
    definite.  load_f / load_g supply already-assembled load vectors as
    functions of time.  Conservation compatibility is judged from B and,
    when interface loads are present, from samples of their sum.
    """
    mats = [np.atleast_2d(np.asarray(m, dtype=float)) for m in (M1, L1, T1, M2, L2, T2, M_gamma)]
    M1, L1, T1, M2, L2, T2, M_gamma = mats
    _check_spd("M1", M1)
    _check_spd("M2", M2)
    _check_spd("M_gamma", M_gamma)
    B = np.asarray(B, dtype=float).reshape(2, 2)
    compat, psd = _b_flags(B)
    if compat and not (load_g[0] is None and load_g[1] is None):
        z1 = load_g[0] or (lambda t: np.zeros(M_gamma.shape[0]))
        z2 = load_g[1] or (lambda t: np.zeros(M_gamma.shape[0]))
        worst = ref = 0.0
        for t in (0.0, 0.37, 1.0):
            v1, v2 = np.asarray(z1(t), dtype=float), np.asarray(z2(t), dtype=float)
            worst = max(worst, float(np.max(np.abs(v1 + v2))))
            ref = max(ref, float(np.max(np.abs(v1))), 1.0)
        compat = worst <= 1e-10 * ref
    return FeOperators(
        M=(sp.csr_matrix(M1), sp.csr_matrix(M2)),
        L=(sp.csr_matrix(L1), sp.csr_matrix(L2)),
        T=(sp.csr_matrix(T1), sp.csr_matrix(T2)),
        M_gamma=sp.csr_matrix(M_gamma),
        B=B,
        load_f=tuple(load_f),
        load_g=tuple(load_g),
        u0=u0,
        h=h,
        conservation_compatible=compat,
        b_psd=psd,
        meta={"source": "matrices"},
    )


def coercivity_probe(ops: FeOperators, n_samples: int = 50, seed: int = 0) -> float:
    """Smallest sampled Rayleigh quotient of the symmetric part of L.

    A cheap lower-bound estimate of the coercivity constant; for the
    shipped advection presets the skew part cancels out of the quotient,
    so diffusion alone sets the value.
    """
    rng = np.random.default_rng(seed)
    worst = np.inf
    for i in range(2):
        d = ops.d_omega[i]
        if d == 0:
            worst = min(worst, 0.0)
            continue
        Ls = ops.L[i]
        for _ in range(n_samples):
            v = rng.standard_normal(d)
            lv = Ls @ v
            worst = min(worst, float(v @ lv) / float(v @ v))
    return worst if np.isfinite(worst) else 0.0
