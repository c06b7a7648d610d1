"""Taylor-Hood finite elements and the implicit-Euler micro step.

Velocity is piecewise quadratic (vertex + edge-midpoint nodes, two
components), pressure piecewise linear on vertices. All element integrals
use a 7-point triangle rule exact for polynomials of degree <= 5, the
degree of the convection form.

Velocity DOF layout: component-major, dof = comp * n_vnodes + node.
Coupled systems append the pressure block after the velocity DOFs.

Front tracking deforms meshes without changing connectivity, so a
FunctionSpace can be rebuilt on a deformed mesh with `like=` to reuse all
combinatorial data (edge numbering, sparsity patterns, boundary masks) and
recompute only geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Callable, Optional

import numpy as np

from . import sparse
from .errors import DimensionMismatch, NonlinearDivergence
from .meshing import ALL_TAGS, TAG_INFLOW, TAG_WALL_BOTTOM, TAG_WALL_TOP, Mesh

PICARD_TOL = 1e-9
PICARD_MAX_ITER = 50

# 7-point degree-5 quadrature on the reference triangle, weights sum to 1.
_S15 = math.sqrt(15.0)
_B1 = (6.0 - _S15) / 21.0
_B2 = (6.0 + _S15) / 21.0
_W1 = (155.0 - _S15) / 1200.0
_W2 = (155.0 + _S15) / 1200.0
QUAD_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [1 - 2 * _B1, _B1, _B1],
        [_B1, 1 - 2 * _B1, _B1],
        [_B1, _B1, 1 - 2 * _B1],
        [1 - 2 * _B2, _B2, _B2],
        [_B2, 1 - 2 * _B2, _B2],
        [_B2, _B2, 1 - 2 * _B2],
    ]
)
QUAD_WEIGHTS = np.array([9 / 40, _W1, _W1, _W1, _W2, _W2, _W2])

# Barycentric gradients in reference coordinates (xi, eta) = (lam1, lam2).
_DLAM = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def p1_values(bary: np.ndarray) -> np.ndarray:
    """P1 basis values, shape (3, npts)."""
    return np.asarray(bary, dtype=np.float64).T.copy()


def p2_values(bary: np.ndarray) -> np.ndarray:
    """P2 basis values, shape (6, npts).

    Local node order: vertices 0..2, then midpoints of edges
    (0,1), (1,2), (2,0).
    """
    lam = np.asarray(bary, dtype=np.float64)
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    return np.stack(
        [
            l0 * (2 * l0 - 1),
            l1 * (2 * l1 - 1),
            l2 * (2 * l2 - 1),
            4 * l0 * l1,
            4 * l1 * l2,
            4 * l2 * l0,
        ]
    )


def p2_reference_gradients(bary: np.ndarray) -> np.ndarray:
    """P2 basis gradients w.r.t. reference coordinates, shape (6, npts, 2)."""
    lam = np.asarray(bary, dtype=np.float64)
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    d0, d1, d2 = _DLAM
    grads = np.empty((6, lam.shape[0], 2))
    grads[0] = (4 * l0 - 1)[:, None] * d0
    grads[1] = (4 * l1 - 1)[:, None] * d1
    grads[2] = (4 * l2 - 1)[:, None] * d2
    grads[3] = 4 * (l1[:, None] * d0 + l0[:, None] * d1)
    grads[4] = 4 * (l2[:, None] * d1 + l1[:, None] * d2)
    grads[5] = 4 * (l0[:, None] * d2 + l2[:, None] * d0)
    return grads


_PHI1 = p1_values(QUAD_BARY)  # (3, 7)
_PHI2 = p2_values(QUAD_BARY)  # (6, 7)
_DPHI2 = p2_reference_gradients(QUAD_BARY)  # (6, 7, 2)
_PHI_PAIRS = np.einsum("iq,jq->ijq", _PHI2, _PHI2)  # (6, 6, 7)
_M_REF = np.einsum("q,iq,jq->ij", QUAD_WEIGHTS, _PHI2, _PHI2)  # unit-area mass


@dataclass(frozen=True)
class FlowParams:
    """Physical parameters of the flow problem.

    inflow(t, y) gives the x-velocity profile on the inflow boundary and
    body_force(t, x, y) the force density as an (n, 2) array; both must be
    1-periodic in t. The viscous coefficient is the dynamic viscosity
    rho * nu throughout, matching the Cauchy stress used for the wall
    traction.
    """

    rho: float
    nu: float
    inflow: Optional[Callable] = None
    body_force: Optional[Callable] = None

    def __post_init__(self):
        if self.rho <= 0 or self.nu <= 0:
            raise ValueError("rho and nu must be positive")

    @property
    def mu(self) -> float:
        return self.rho * self.nu


def pulsatile_inflow(amplitude: float, half_height: float) -> Callable:
    """Parabolic profile amplitude * (1 - y^2/b^2) * sin^2(pi t)."""

    def profile(t, y):
        y = np.asarray(y, dtype=np.float64)
        return amplitude * (1.0 - (y / half_height) ** 2) * math.sin(math.pi * t) ** 2

    return profile


def steady_inflow(amplitude: float, half_height: float) -> Callable:
    def profile(t, y):
        y = np.asarray(y, dtype=np.float64)
        return amplitude * (1.0 - (y / half_height) ** 2)

    return profile


@dataclass(frozen=True)
class BoundarySpec:
    """Dirichlet-velocity boundary setup.

    tags lists the boundary tags with prescribed velocity, applied in
    order so later tags win at shared corner nodes. values maps each tag
    to a function (t, x, y) -> (n, 2) array of velocities. pin_pressure
    replaces one pressure row to fix the constant mode (needed only when
    every boundary is Dirichlet).
    """

    tags: tuple
    values: dict
    pin_pressure: bool = False

    @property
    def structure_key(self):
        return (self.tags, self.pin_pressure)


def _zero_velocity(t, x, y):
    return np.zeros((np.size(x), 2))


def experiment_bc(params: FlowParams) -> BoundarySpec:
    """Inflow profile + no-slip walls + natural (do-nothing) outflow.

    The inflow profile is evaluated with the reference half-height even on
    deformed meshes; the wall tags come last so corners stay no-slip.
    """
    if params.inflow is None:
        raise ValueError("experiment boundary conditions need an inflow profile")

    def inflow_values(t, x, y):
        vx = params.inflow(t, y)
        return np.column_stack([vx, np.zeros_like(vx)])

    return BoundarySpec(
        tags=(TAG_INFLOW, TAG_WALL_TOP, TAG_WALL_BOTTOM),
        values={
            TAG_INFLOW: inflow_values,
            TAG_WALL_TOP: _zero_velocity,
            TAG_WALL_BOTTOM: _zero_velocity,
        },
        pin_pressure=False,
    )


def validation_bc(value: Callable = None) -> BoundarySpec:
    """Dirichlet velocity on the whole boundary with one pressure DOF pinned."""
    fn = value if value is not None else _zero_velocity
    return BoundarySpec(
        tags=ALL_TAGS,
        values={tag: fn for tag in ALL_TAGS},
        pin_pressure=True,
    )


class FunctionSpace:
    """Taylor-Hood space on one mesh, with cached assembly data.

    Passing `like=` with a space of identical connectivity (the deformed
    meshes of front tracking) reuses the combinatorial data and sparsity
    patterns, recomputing only the geometry-dependent values.
    """

    def __init__(self, mesh: Mesh, like: "FunctionSpace" = None):
        self.mesh = mesh
        tri = mesh.triangles
        if like is not None:
            if not (
                np.array_equal(tri, like.mesh.triangles)
                and np.array_equal(mesh.boundary_edges, like.mesh.boundary_edges)
            ):
                raise DimensionMismatch("`like` space has different connectivity")
            self.edges = like.edges
            self.tri_edges = like.tri_edges
            self.tri_vnodes = like.tri_vnodes
            self._edge_index = like._edge_index
            self._dirichlet_nodes = like._dirichlet_nodes
            self._pattern = like.pattern
            self._bc_structure = like._bc_structure
        else:
            pairs = tri[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
            pairs = np.sort(pairs, axis=1)
            self.edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
            self.tri_edges = inverse.reshape(-1, 3)
            # local velocity nodes: [v0, v1, v2, m01, m12, m20]
            self.tri_vnodes = np.hstack(
                [tri, mesh.n_vertices + self.tri_edges]
            )
            self._edge_index = {
                (int(v0), int(v1)): e for e, (v0, v1) in enumerate(self.edges)
            }
            self._dirichlet_nodes: dict = {}
            self._pattern = None
            self._bc_structure: dict = {}

        self.n_vertices = mesh.n_vertices
        self.n_edges = self.edges.shape[0]
        self.n_vnodes = self.n_vertices + self.n_edges
        self.n_velocity_dofs = 2 * self.n_vnodes
        self.n_pressure_dofs = self.n_vertices
        self.n_system = self.n_velocity_dofs + self.n_pressure_dofs
        midpoints = 0.5 * (
            mesh.vertices[self.edges[:, 0]] + mesh.vertices[self.edges[:, 1]]
        )
        self.vnode_xy = np.vstack([mesh.vertices, midpoints])
        self._geo = None

    def same_connectivity(self, other: "FunctionSpace") -> bool:
        return (
            self.mesh.triangles.shape == other.mesh.triangles.shape
            and np.array_equal(self.mesh.triangles, other.mesh.triangles)
            and np.array_equal(self.mesh.boundary_edges, other.mesh.boundary_edges)
        )

    def edge_id(self, v0: int, v1: int) -> int:
        key = (min(v0, v1), max(v0, v1))
        return self._edge_index[key]

    def dirichlet_nodes(self, tag: str) -> np.ndarray:
        """Velocity nodes (vertices + edge midpoints) on edges of one tag."""
        if tag not in self._dirichlet_nodes:
            nodes = set()
            for e, (v0, v1) in enumerate(self.mesh.boundary_edges):
                if self.mesh.boundary_tags[e] != tag:
                    continue
                nodes.add(int(v0))
                nodes.add(int(v1))
                nodes.add(self.n_vertices + self.edge_id(int(v0), int(v1)))
            self._dirichlet_nodes[tag] = np.array(sorted(nodes), dtype=np.int64)
        return self._dirichlet_nodes[tag]

    # -- connectivity-only sparsity patterns --------------------------------

    @property
    def pattern(self) -> SimpleNamespace:
        if self._pattern is None:
            nt = self.mesh.n_triangles
            vn = self.tri_vnodes
            off = self.n_vnodes
            rows_s = np.broadcast_to(vn[:, :, None], (nt, 6, 6)).ravel()
            cols_s = np.broadcast_to(vn[:, None, :], (nt, 6, 6)).ravel()
            comp = np.arange(2) * off
            rows_vv_full = (
                np.broadcast_to(vn[:, :, None, None, None], (nt, 6, 6, 2, 2))
                + comp[None, None, None, :, None]
            ).ravel()
            cols_vv_full = (
                np.broadcast_to(vn[:, None, :, None, None], (nt, 6, 6, 2, 2))
                + comp[None, None, None, None, :]
            ).ravel()
            rows_b = (
                np.broadcast_to(
                    self.mesh.triangles[:, :, None, None], (nt, 3, 6, 2)
                ).ravel()
                + self.n_velocity_dofs
            )
            cols_b = (
                np.broadcast_to(vn[:, None, :, None], (nt, 3, 6, 2))
                + np.arange(2)[None, None, None, :] * off
            ).ravel()
            self._pattern = SimpleNamespace(
                rows_s=rows_s,
                cols_s=cols_s,
                rows_vv=np.concatenate([rows_s, rows_s + off]),
                cols_vv=np.concatenate([cols_s, cols_s + off]),
                rows_vv_full=rows_vv_full,
                cols_vv_full=cols_vv_full,
                rows_b=rows_b,
                cols_b=cols_b,
                dofs_vel=vn[:, :, None] + np.arange(2)[None, None, :] * off,
            )
        return self._pattern

    # -- geometry-dependent element data -------------------------------------

    @property
    def geo(self) -> SimpleNamespace:
        if self._geo is None:
            self._geo = self._build_geo()
        return self._geo

    def _build_geo(self) -> SimpleNamespace:
        mesh = self.mesh
        pat = self.pattern
        p = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
        j11 = p[:, 1, 0] - p[:, 0, 0]
        j12 = p[:, 2, 0] - p[:, 0, 0]
        j21 = p[:, 1, 1] - p[:, 0, 1]
        j22 = p[:, 2, 1] - p[:, 0, 1]
        det = j11 * j22 - j12 * j21
        if np.any(det <= 0):
            raise ValueError("mesh contains non-positively-oriented triangles")
        area = 0.5 * det
        jinv_t = np.empty((det.size, 2, 2))
        jinv_t[:, 0, 0] = j22 / det
        jinv_t[:, 0, 1] = -j21 / det
        jinv_t[:, 1, 0] = -j12 / det
        jinv_t[:, 1, 1] = j11 / det

        # physical P2 gradients at quadrature points: (nt, 6, 7, 2)
        g2 = np.einsum("edk,iqk->eiqd", jinv_t, _DPHI2)
        m_loc = area[:, None, None] * _M_REF
        k_loc = np.einsum("e,q,eiqd,ejqd->eij", area, QUAD_WEIGHTS, g2, g2)
        # divergence block: row = pressure vertex, col = velocity node/component
        b_loc = np.einsum("e,q,iq,ejqd->eijd", area, QUAD_WEIGHTS, _PHI1, g2)

        m_vals = m_loc.ravel()
        k_vals = k_loc.ravel()

        def scalar_csr(vals):
            t = sparse.Triplets(self.n_vnodes, self.n_vnodes)
            t.extend(pat.rows_s, pat.cols_s, vals)
            return sparse.to_csr(t)

        bt = sparse.Triplets(self.n_pressure_dofs, self.n_velocity_dofs)
        bt.extend(pat.rows_b - self.n_velocity_dofs, pat.cols_b, b_loc.ravel())
        divergence = sparse.to_csr(bt)
        divergence_scipy = divergence.to_scipy()

        return SimpleNamespace(
            area=area,
            jinv_t=jinv_t,
            g2=g2,
            m_vals2=np.concatenate([m_vals, m_vals]),
            k_vals2=np.concatenate([k_vals, k_vals]),
            b_vals=b_loc.ravel(),
            mass_scalar=scalar_csr(m_vals).to_scipy(),
            stiffness_scalar=scalar_csr(k_vals).to_scipy(),
            divergence=divergence,
            divergence_scipy=divergence_scipy,
            divergence_t_scipy=divergence_scipy.T.tocsr(),
        )

    def element_velocity(self, u: np.ndarray) -> np.ndarray:
        """Per-element nodal velocity coefficients, (nt, 6, 2)."""
        return np.stack(
            [u[: self.n_vnodes][self.tri_vnodes], u[self.n_vnodes :][self.tri_vnodes]],
            axis=-1,
        )

    def _velocity_at_quad(self, u: np.ndarray) -> np.ndarray:
        """Velocity values at quadrature points, (nt, 7, 2)."""
        wel = self.element_velocity(u)  # (nt, 6, 2)
        return np.matmul(_PHI2.T[None, :, :], wel)

    def _gradient_at_quad(self, u: np.ndarray) -> np.ndarray:
        """Velocity gradients d v_c / d x_d at quadrature points, (nt, 7, 2, 2)."""
        wel = self.element_velocity(u)
        return np.einsum("eic,eiqd->eqcd", wel, self.geo.g2)

    def convection_values(self, u: np.ndarray) -> np.ndarray:
        """Element values of the linearized convection (w . grad) operator,
        flattened to match (rows_vv, cols_vv) for both components."""
        geo = self.geo
        nt = geo.area.size
        wq = self._velocity_at_quad(u)
        # conv[e, j, q] = (w . grad phi_j)(q)
        conv = wq[:, None, :, 0] * geo.g2[..., 0] + wq[:, None, :, 1] * geo.g2[..., 1]
        # n_loc[e, i, j] = sum_q area_e w_q phi_i(q) conv[e, j, q]
        phi_w = geo.area[:, None, None] * (_PHI2 * QUAD_WEIGHTS)[None, :, :]
        n_vals = np.matmul(phi_w, conv.transpose(0, 2, 1)).ravel()
        return np.concatenate([n_vals, n_vals])

    def convection_jacobian_values(self, u: np.ndarray) -> np.ndarray:
        """Element values of the reaction block (phi . grad) u of the Newton
        Jacobian, flattened to match (rows_vv_full, cols_vv_full)."""
        geo = self.geo
        nt = geo.area.size
        grad_u = self._gradient_at_quad(u)
        weighted = (geo.area[:, None] * QUAD_WEIGHTS[None, :])[:, :, None] * (
            grad_u.reshape(nt, 7, 4)
        )
        # g2_loc[e, (i,j), (c,d)] = sum_q phi_i phi_j weighted[e, q, (c,d)]
        return np.matmul(_PHI_PAIRS.reshape(36, 7)[None, :, :], weighted).ravel()

    def convection_apply(self, u: np.ndarray) -> np.ndarray:
        """Weak form of (u . grad) u tested against velocity basis functions."""
        geo = self.geo
        wq = self._velocity_at_quad(u)
        grad_u = self._gradient_at_quad(u)
        conv = np.einsum("eqd,eqcd->eqc", wq, grad_u)  # (u . grad) u
        weighted = (geo.area[:, None] * QUAD_WEIGHTS[None, :])[:, :, None] * conv
        local = np.matmul(_PHI2[None, :, :], weighted)  # (nt, 6, 2)
        return np.bincount(
            self.pattern.dofs_vel.ravel(),
            weights=local.ravel(),
            minlength=self.n_velocity_dofs,
        )

    def quad_points_xy(self) -> np.ndarray:
        """Physical coordinates of all quadrature points, (nt, 7, 2)."""
        p = self.mesh.vertices[self.mesh.triangles]
        return np.einsum("eik,iq->eqk", p, _PHI1)

    # -- Dirichlet structure (connectivity only) -----------------------------

    def bc_structure(self, bc: BoundarySpec) -> SimpleNamespace:
        key = bc.structure_key
        if key not in self._bc_structure:
            pat = self.pattern
            nodes = [self.dirichlet_nodes(t) for t in bc.tags]
            all_nodes = (
                np.unique(np.concatenate(nodes))
                if nodes
                else np.empty(0, dtype=np.int64)
            )
            dofs = np.concatenate([all_nodes, all_nodes + self.n_vnodes])
            rows = dofs.copy()
            if bc.pin_pressure:
                rows = np.append(rows, self.n_velocity_dofs)  # pressure vertex 0
            row_set = np.zeros(self.n_system, dtype=bool)
            row_set[rows] = True
            keep_vv = ~row_set[pat.rows_vv]
            keep_g = ~row_set[pat.cols_b]  # gradient block rows = velocity dofs
            keep_b = ~row_set[pat.rows_b]
            keep_full = ~row_set[pat.rows_vv_full]
            rows_final = np.concatenate(
                [pat.rows_vv[keep_vv], pat.cols_b[keep_g], pat.rows_b[keep_b], rows]
            )
            cols_final = np.concatenate(
                [pat.cols_vv[keep_vv], pat.rows_b[keep_g], pat.cols_b[keep_b], rows]
            )
            rows_newton = np.concatenate([rows_final, pat.rows_vv_full[keep_full]])
            cols_newton = np.concatenate([cols_final, pat.cols_vv_full[keep_full]])
            pos = {int(n): i for i, n in enumerate(all_nodes)}
            tag_positions = {
                tag: np.array(
                    [pos[int(n)] for n in self.dirichlet_nodes(tag)], dtype=np.int64
                )
                for tag in bc.tags
            }
            self._bc_structure[key] = SimpleNamespace(
                dirichlet_nodes=all_nodes,
                dirichlet_rows=rows,
                tag_positions=tag_positions,
                keep_vv=keep_vv,
                keep_g=keep_g,
                keep_b=keep_b,
                keep_full=keep_full,
                rows_final=rows_final,
                cols_final=cols_final,
                solver_picard=sparse.PatternSolver(
                    self.n_system, rows_final, cols_final
                ),
                solver_newton=sparse.PatternSolver(
                    self.n_system, rows_newton, cols_newton
                ),
                n_identity=rows.size,
            )
        return self._bc_structure[key]

    def dirichlet_values(self, bc: BoundarySpec, t: float) -> np.ndarray:
        """Velocity values at the Dirichlet nodes of bc, later tags winning."""
        structure = self.bc_structure(bc)
        vals = np.zeros((structure.dirichlet_nodes.size, 2))
        for tag in bc.tags:
            idx = structure.tag_positions[tag]
            if idx.size == 0:
                continue
            xy = self.vnode_xy[self.dirichlet_nodes(tag)]
            v = np.asarray(bc.values[tag](t, xy[:, 0], xy[:, 1]), dtype=np.float64)
            vals[idx] = v
        return vals


@dataclass(frozen=True)
class FlowField:
    """Coefficient vectors of one (velocity, pressure) snapshot."""

    space: FunctionSpace
    u: np.ndarray  # velocity coefficients, length 2 * n_vnodes
    p: np.ndarray  # pressure coefficients, length n_vertices
    time: float
    div_residual: Optional[float] = None
    picard_iterations: int = 0

    def __post_init__(self):
        if self.u.shape != (self.space.n_velocity_dofs,):
            raise DimensionMismatch("velocity coefficient length mismatch")
        if self.p.shape != (self.space.n_pressure_dofs,):
            raise DimensionMismatch("pressure coefficient length mismatch")
        self.u.setflags(write=False)
        self.p.setflags(write=False)

    def with_time(self, time: float) -> "FlowField":
        return FlowField(
            self.space,
            self.u.copy(),
            self.p.copy(),
            time,
            self.div_residual,
            self.picard_iterations,
        )

    def velocity_at_vertices(self) -> np.ndarray:
        nv = self.space.n_vertices
        off = self.space.n_vnodes
        return np.column_stack([self.u[:nv], self.u[off : off + nv]])


def zero_field(space: FunctionSpace, time: float = 0.0) -> FlowField:
    return FlowField(
        space,
        np.zeros(space.n_velocity_dofs),
        np.zeros(space.n_pressure_dofs),
        time,
        div_residual=0.0,
    )


def interpolate_velocity(space: FunctionSpace, fn: Callable) -> np.ndarray:
    """Velocity coefficients of the nodal interpolant of fn(x, y) -> (vx, vy)."""
    xy = space.vnode_xy
    vx, vy = fn(xy[:, 0], xy[:, 1])
    u = np.empty(space.n_velocity_dofs)
    u[: space.n_vnodes] = vx
    u[space.n_vnodes :] = vy
    return u


def interpolate_pressure(space: FunctionSpace, fn: Callable) -> np.ndarray:
    xy = space.mesh.vertices
    return np.asarray(fn(xy[:, 0], xy[:, 1]), dtype=np.float64)


def assemble_constant_operators(space: FunctionSpace, params: FlowParams = None):
    """Unit-coefficient mass, viscous stiffness and divergence matrices.

    The micro stepper scales these with rho/dt, rho*nu etc., so the
    returned matrices are parameter-free. M is SPD, K is PSD with constant
    fields in its kernel, and B annihilates constant velocities.
    """
    pat = space.pattern
    geo = space.geo
    nv2 = space.n_velocity_dofs
    mass = sparse.Triplets(nv2, nv2)
    mass.extend(pat.rows_vv, pat.cols_vv, geo.m_vals2)
    stiffness = sparse.Triplets(nv2, nv2)
    stiffness.extend(pat.rows_vv, pat.cols_vv, geo.k_vals2)
    return {
        "M": sparse.to_csr(mass),
        "K": sparse.to_csr(stiffness),
        "B": geo.divergence,
    }


def assemble_convection(space: FunctionSpace, w, params: FlowParams = None):
    """Convection matrix N(w) with (N v)_i = integral phi_i (w . grad) v."""
    u = w.u if isinstance(w, FlowField) else np.asarray(w, dtype=np.float64)
    if u.shape != (space.n_velocity_dofs,):
        raise DimensionMismatch("convection field does not match the space")
    pat = space.pattern
    t = sparse.Triplets(space.n_velocity_dofs, space.n_velocity_dofs)
    t.extend(pat.rows_vv, pat.cols_vv, space.convection_values(u))
    return sparse.to_csr(t)


def _body_force_vector(space: FunctionSpace, params: FlowParams, t: float):
    if params.body_force is None:
        return np.zeros(space.n_velocity_dofs)
    geo = space.geo
    xq = space.quad_points_xy()  # (nt, 7, 2)
    f = np.asarray(
        params.body_force(t, xq[..., 0].ravel(), xq[..., 1].ravel()), dtype=np.float64
    ).reshape(xq.shape[0], xq.shape[1], 2)
    local = np.einsum("e,q,iq,eqc->eic", geo.area, QUAD_WEIGHTS, _PHI2, f)
    return np.bincount(
        space.pattern.dofs_vel.ravel(),
        weights=local.ravel(),
        minlength=space.n_velocity_dofs,
    )


def apply_velocity_mass(space: FunctionSpace, u: np.ndarray) -> np.ndarray:
    geo = space.geo
    n = space.n_vnodes
    out = np.empty_like(u)
    out[:n] = geo.mass_scalar @ u[:n]
    out[n:] = geo.mass_scalar @ u[n:]
    return out


def _apply_velocity_stiffness(space: FunctionSpace, u: np.ndarray) -> np.ndarray:
    geo = space.geo
    n = space.n_vnodes
    out = np.empty_like(u)
    out[:n] = geo.stiffness_scalar @ u[:n]
    out[n:] = geo.stiffness_scalar @ u[n:]
    return out


def micro_step(
    prev: FlowField,
    t_n: float,
    dt: float,
    params: FlowParams,
    bc: BoundarySpec,
    picard_tol: float = PICARD_TOL,
    picard_max_iter: int = PICARD_MAX_ITER,
    initial_guess: Optional[FlowField] = None,
    picard_sweeps: int = 1,
) -> FlowField:
    """One implicit-Euler step of the incompressible flow.

    Solves the fully implicit momentum/continuity system by fixed-point
    iteration on the convection field. Each pass solves a linearized
    correction system in delta form (so rounding stays relative to the
    correction, not to the state). The first picard_sweeps passes freeze
    convection at the previous iterate (Picard/Oseen); remaining passes
    add the Newton reaction block with a backtracking line search, which
    the strongly narrowed domains need for contraction. Iteration stops
    when the applied velocity update drops below picard_tol in the max
    norm, and fails with NonlinearDivergence after picard_max_iter passes.
    """
    if not 0 < dt <= 1:
        raise ValueError("micro step size must satisfy 0 < dt <= 1")
    space = prev.space
    geo = space.geo
    structure = space.bc_structure(bc)
    n_u = space.n_velocity_dofs

    rho = params.rho
    mu = params.mu
    const_vals = (rho / dt) * geo.m_vals2 + mu * geo.k_vals2
    g_vals = -geo.b_vals[structure.keep_g]
    b_vals = geo.b_vals[structure.keep_b]

    rhs = np.zeros(space.n_system)
    rhs[:n_u] = (rho / dt) * apply_velocity_mass(space, prev.u) + _body_force_vector(
        space, params, t_n
    )
    bvals = space.dirichlet_values(bc, t_n)
    nodes = structure.dirichlet_nodes
    rhs[nodes] = bvals[:, 0]
    rhs[nodes + space.n_vnodes] = bvals[:, 1]
    if bc.pin_pressure:
        rhs[n_u] = 0.0

    def residual(x):
        v = x[:n_u]
        p = x[n_u:]
        f = np.empty(space.n_system)
        f[:n_u] = (
            (rho / dt) * apply_velocity_mass(space, v)
            + mu * _apply_velocity_stiffness(space, v)
            + rho * space.convection_apply(v)
            - geo.divergence_t_scipy @ p
        )
        f[n_u:] = geo.divergence_scipy @ v
        f -= rhs
        rows = structure.dirichlet_rows
        f[rows] = x[rows] - rhs[rows]
        return f

    identity = np.ones(structure.n_identity)

    start = initial_guess if initial_guess is not None else prev
    x = np.concatenate([start.u, start.p])
    # start exactly on the Dirichlet data so constrained rows stay exact
    x[nodes] = bvals[:, 0]
    x[nodes + space.n_vnodes] = bvals[:, 1]
    if bc.pin_pressure:
        x[n_u] = 0.0

    f = residual(x)
    converged = False
    increment = np.inf
    for iteration in range(1, picard_max_iter + 1):
        newton = iteration > picard_sweeps
        a_vals = const_vals + rho * space.convection_values(x[:n_u])
        vals = [a_vals[structure.keep_vv], g_vals, b_vals, identity]
        if newton:
            solver = structure.solver_newton
            vals.append(
                rho * space.convection_jacobian_values(x[:n_u])[structure.keep_full]
            )
        else:
            solver = structure.solver_picard
        delta = solver.solve(np.concatenate(vals), -f)

        f_norm = np.linalg.norm(f)
        alpha = 1.0
        while True:
            x_trial = x + alpha * delta
            f_trial = residual(x_trial)
            if not newton or np.linalg.norm(f_trial) <= (1 - 1e-4 * alpha) * f_norm:
                break
            alpha *= 0.5
            if alpha < 1 / 64:  # no descent; take a safeguarded short step
                alpha = 0.25
                x_trial = x + alpha * delta
                f_trial = residual(x_trial)
                break
        x, f = x_trial, f_trial
        increment = float(np.max(np.abs(alpha * delta[:n_u]))) if n_u else 0.0
        if increment <= picard_tol:
            converged = True
            break

    if not converged:
        raise NonlinearDivergence(
            f"nonlinear iteration stalled at increment {increment:.3e} after "
            f"{picard_max_iter} iterations (dt={dt:g}, t={t_n:g})",
            iterations=picard_max_iter,
            increment=increment,
        )

    # pin the constrained entries to the prescribed data exactly
    x[nodes] = bvals[:, 0]
    x[nodes + space.n_vnodes] = bvals[:, 1]
    if bc.pin_pressure:
        x[n_u] = 0.0
    v = x[:n_u]
    p = x[n_u:]
    div_residual = float(np.linalg.norm(geo.divergence_scipy @ v))
    return FlowField(
        space,
        v,
        p,
        time=t_n,
        div_residual=div_residual,
        picard_iterations=iteration,
    )


def field_difference_norm(u: FlowField, v: FlowField, which: str = "H1") -> float:
    """L2 or H1 norm of the velocity difference, via unit-parameter M and K."""
    if u.space.n_velocity_dofs != v.space.n_velocity_dofs:
        raise DimensionMismatch("fields live on different spaces")
    return coefficient_norm(u.space, u.u - v.u, which)


def coefficient_norm(space: FunctionSpace, e: np.ndarray, which: str = "H1") -> float:
    if e.shape != (space.n_velocity_dofs,):
        raise DimensionMismatch("coefficient length mismatch")
    if which not in ("L2", "H1"):
        raise ValueError("norm must be 'L2' or 'H1'")
    geo = space.geo
    n = space.n_vnodes
    total = 0.0
    for comp in (e[:n], e[n:]):
        total += comp @ (geo.mass_scalar @ comp)
        if which == "H1":
            total += comp @ (geo.stiffness_scalar @ comp)
    # guard tiny negative round-off from the quadratic form
    return math.sqrt(max(total, 0.0))
