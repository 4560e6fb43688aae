"""Structured bilinear-quad meshes for the two unit subdomains.

Subdomain 1 is the unit square above the shared interface (the segment
y = 0, 0 < x < 1), subdomain 2 the unit square below it.  Nodes on the
open interface are unknowns; every other boundary node carries a
homogeneous Dirichlet condition and is eliminated from the system.  The
two corner nodes of the interface belong to the Dirichlet part, so the
interface trace space vanishes at the interface endpoints.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

log = logging.getLogger(__name__)

INTERIOR, INTERFACE, DIRICHLET = 0, 1, 2


class MatchError(ValueError):
    """The two meshes do not share a coincident interface grid."""


@dataclasses.dataclass(frozen=True)
class Mesh:
    subdomain: int
    nx: int
    ny: int
    nodes: np.ndarray  # (n_nodes, 2) coordinates
    quads: np.ndarray  # (n_elems, 4) counterclockwise connectivity
    kind: np.ndarray  # per-node INTERIOR / INTERFACE / DIRICHLET
    free_dof: np.ndarray  # node -> free dof index, -1 on Dirichlet nodes
    interface_nodes: np.ndarray  # interface node ids ordered by x
    h: float

    @property
    def n_free(self) -> int:
        return int((self.free_dof >= 0).sum())

    @property
    def hx(self) -> float:
        return 1.0 / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny


def build_mesh(subdomain: int, nx: int, ny: int) -> Mesh:
    """Uniform tensor grid of bilinear quads on subdomain 1 or 2."""
    if subdomain not in (1, 2):
        raise ValueError("subdomain must be 1 or 2")
    if nx < 1 or ny < 1:
        raise ValueError("element counts must be at least 1")
    xs = np.arange(nx + 1) / nx
    ys = np.arange(ny + 1) / ny + (0.0 if subdomain == 1 else -1.0)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])  # row-major: id = iy*(nx+1)+ix

    def nid(ix, iy):
        return iy * (nx + 1) + ix

    quads = np.array(
        [
            [nid(ix, iy), nid(ix + 1, iy), nid(ix + 1, iy + 1), nid(ix, iy + 1)]
            for iy in range(ny)
            for ix in range(nx)
        ],
        dtype=int,
    )

    iy_interface = 0 if subdomain == 1 else ny
    kind = np.full(len(nodes), INTERIOR, dtype=np.int8)
    for iy in range(ny + 1):
        for ix in range(nx + 1):
            on_side = ix == 0 or ix == nx
            on_far = iy == (ny if subdomain == 1 else 0)
            on_interface_row = iy == iy_interface
            if on_interface_row and not on_side:
                kind[nid(ix, iy)] = INTERFACE
            elif on_side or on_far:
                kind[nid(ix, iy)] = DIRICHLET

    free_dof = np.full(len(nodes), -1, dtype=int)
    free = np.flatnonzero(kind != DIRICHLET)
    free_dof[free] = np.arange(len(free))

    interface_nodes = np.array(
        [nid(ix, iy_interface) for ix in range(1, nx)], dtype=int
    )
    h = float(np.hypot(1.0 / nx, 1.0 / ny))
    for arr in (nodes, quads, kind, free_dof, interface_nodes):
        arr.flags.writeable = False
    return Mesh(subdomain, nx, ny, nodes, quads, kind, free_dof, interface_nodes, h)


@dataclasses.dataclass(frozen=True)
class InterfaceMap:
    """Shared numbering of the interface unknowns of two matched meshes."""

    x: np.ndarray  # interface node abscissae, increasing
    dofs_1: np.ndarray  # interface slot -> free dof index in mesh 1
    dofs_2: np.ndarray

    @property
    def d_gamma(self) -> int:
        return len(self.x)


def match_interfaces(m1: Mesh, m2: Mesh) -> InterfaceMap:
    """Identify the coincident interface grids of the two subdomain meshes."""
    if m1.subdomain != 1 or m2.subdomain != 2:
        raise MatchError("expected meshes for subdomains 1 and 2, in that order")
    x1 = m1.nodes[m1.interface_nodes, 0]
    x2 = m2.nodes[m2.interface_nodes, 0]
    if len(x1) != len(x2) or (len(x1) and np.max(np.abs(x1 - x2)) > 1e-12):
        raise MatchError(
            f"interface grids do not coincide (nx={m1.nx} vs nx={m2.nx})"
        )
    if len(x1) == 0:
        log.warning("degenerate interface: no interface unknowns (nx=1)")
    dofs_1 = m1.free_dof[m1.interface_nodes]
    dofs_2 = m2.free_dof[m2.interface_nodes]
    for arr in (x1, dofs_1, dofs_2):
        arr.flags.writeable = False
    return InterfaceMap(x1, dofs_1, dofs_2)


def dump_text(mesh: Mesh, stream) -> None:
    """Plain-text mesh dump: header, then node and element lines."""
    stream.write(
        f"# mesh subdomain={mesh.subdomain} nx={mesh.nx} ny={mesh.ny} "
        f"nodes={len(mesh.nodes)} elements={len(mesh.quads)} "
        "(node lines: id x y kind; element lines: id n0 n1 n2 n3)\n"
    )
    for i, (x, y) in enumerate(mesh.nodes):
        stream.write(f"{i} {x:.17g} {y:.17g} {int(mesh.kind[i])}\n")
    for e, quad in enumerate(mesh.quads):
        stream.write(f"{e} {quad[0]} {quad[1]} {quad[2]} {quad[3]}\n")
