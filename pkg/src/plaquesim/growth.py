"""Growth physics and the two temporal drivers.

Wall shear stress feeds the reaction term R = 1/((1+u)(1+|sigma|^2)),
whose period average advances the slow concentration U by explicit Euler
macro steps. run_multiscale performs the front-tracking multiscale loop
(deform, solve periodic flow, average, step); run_direct is the fully
resolved reference coupling that updates the domain every micro step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import NegativeConcentration
from .fem import (
    BoundarySpec,
    FlowField,
    FlowParams,
    FunctionSpace,
    experiment_bc,
    micro_step,
    p2_reference_gradients,
    zero_field,
)
from .meshing import (
    GaussianBump,
    Mesh,
    build_reference_mesh,
    deform_mesh,
    wall_edges,
)
from .periodic import PeriodicTrajectory, find_periodic_solution, warm_start

# 2-point Gauss positions on [0, 1]
_GAUSS2 = (0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0))


@dataclass(frozen=True)
class GrowthParams:
    """Macro-scale parameters of the growth model."""

    epsilon: float  # scale separation, << 1
    sigma0: float  # wall shear stress normalization
    dT: float  # macro step, in flow periods
    dt: float  # micro step, 1/N for integer N
    T: float  # horizon, in flow periods
    u0: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0 or self.sigma0 <= 0:
            raise ValueError("epsilon and sigma0 must be positive")
        if self.u0 < 0:
            raise NegativeConcentration("initial concentration must be nonnegative")

    @property
    def steps_per_period(self) -> int:
        n = round(1.0 / self.dt)
        if abs(n * self.dt - 1.0) > 1e-9:
            raise ValueError("1/dt must be an integer")
        return n

    @property
    def macro_steps(self) -> int:
        m = round(self.T / self.dT)
        if abs(m * self.dT - self.T) > 1e-9 * max(1.0, self.T):
            raise ValueError("T/dT must be an integer")
        return m


@dataclass(frozen=True)
class MacroRecord:
    """One row of the per-macro-step history."""

    m: int
    T_m: float
    U: float
    R_avg: float
    periodicity_residual: float
    cycles: int
    seconds: float


@dataclass(frozen=True)
class MacroState:
    """Growth variable with its macro time and step history."""

    U: float
    T_m: float
    history: tuple = ()

    def __post_init__(self):
        if self.U < 0:
            raise NegativeConcentration("concentration must stay nonnegative")


@dataclass(frozen=True)
class RunDiagnostics:
    """Worst-case solver health indicators aggregated over a run."""

    max_div_residual: float = 0.0
    max_periodicity_residual: float = 0.0
    max_cycles: int = 0
    max_picard_iterations: int = 0

    def absorb_trajectory(self, traj: PeriodicTrajectory) -> "RunDiagnostics":
        return RunDiagnostics(
            max_div_residual=max(self.max_div_residual, traj.max_div_residual),
            max_periodicity_residual=max(
                self.max_periodicity_residual, traj.periodicity_residual
            ),
            max_cycles=max(self.max_cycles, traj.cycles_used),
            max_picard_iterations=max(
                self.max_picard_iterations, traj.max_picard_iterations
            ),
        )

    def absorb_field(self, field: FlowField) -> "RunDiagnostics":
        return RunDiagnostics(
            max_div_residual=max(self.max_div_residual, field.div_residual or 0.0),
            max_periodicity_residual=self.max_periodicity_residual,
            max_cycles=self.max_cycles,
            max_picard_iterations=max(
                self.max_picard_iterations, field.picard_iterations
            ),
        )


class WallTraction:
    """Integrates the tangential viscous traction over both channel walls.

    The velocity gradient on each wall edge comes from the single adjacent
    triangle's quadratic field, sampled at 2 Gauss points per edge.
    Passing a template built on a mesh with the same connectivity skips the
    combinatorial setup (run_direct rebuilds the geometry every step).
    """

    def __init__(self, space: FunctionSpace, template: "WallTraction" = None):
        self.space = space
        mesh = space.mesh
        if template is not None:
            self.tris = template.tris
            self.tri_vnodes = template.tri_vnodes
            self.ref_grads = template.ref_grads
            edge_verts = template.edge_verts
        else:
            edges = wall_edges(mesh)
            self.tris = np.array([e.triangle for e in edges], dtype=np.int64)
            self.tri_vnodes = space.tri_vnodes[self.tris]  # (ne, 6)
            edge_verts = np.array([e.vertices for e in edges], dtype=np.int64)
            # barycentric coordinates of the 2 Gauss points on each edge
            tri_verts = mesh.triangles[self.tris]  # (ne, 3)
            i0 = np.argmax(tri_verts == edge_verts[:, :1], axis=1)
            i1 = np.argmax(tri_verts == edge_verts[:, 1:2], axis=1)
            ne = self.tris.size
            bary = np.zeros((ne, 2, 3))
            rows = np.arange(ne)
            for g, s in enumerate(_GAUSS2):
                bary[rows, g, i0] = 1.0 - s
                bary[rows, g, i1] = s
            # reference gradients at all edge Gauss points: (ne, 6, 2, 2)
            ref = p2_reference_gradients(bary.reshape(-1, 3))
            self.ref_grads = ref.reshape(6, ne, 2, 2).transpose(1, 0, 2, 3)
        self.edge_verts = edge_verts

        # geometry of the current (possibly deformed) mesh
        p0 = mesh.vertices[edge_verts[:, 0]]
        p1 = mesh.vertices[edge_verts[:, 1]]
        tangent = p1 - p0
        self.lengths = np.hypot(tangent[:, 0], tangent[:, 1])
        normals = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / self.lengths[
            :, None
        ]
        centroids = mesh.vertices[mesh.triangles[self.tris]].mean(axis=1)
        midpoints = 0.5 * (p0 + p1)
        flip = np.einsum("ed,ed->e", normals, midpoints - centroids) < 0
        normals[flip] *= -1.0
        self.normals = normals
        jinv_t = space.geo.jinv_t[self.tris]  # (ne, 2, 2)
        # physical P2 gradients at the Gauss points: (ne, 6, 2 pts, 2)
        self.basis_grads = np.einsum("edk,eigk->eigd", jinv_t, self.ref_grads)

    def traction_integral(self, u: np.ndarray, mu: float) -> np.ndarray:
        """integral over both walls of mu (I - n n^T)(grad v + grad v^T) n ds."""
        off = self.space.n_vnodes
        coeff = np.stack(
            [u[:off][self.tri_vnodes], u[off:][self.tri_vnodes]], axis=-1
        )  # (ne, 6, 2): component c of node i
        # grad_v[e, g, c, d] = d v_c / d x_d at Gauss point g
        grad_v = np.einsum("eic,eigd->egcd", coeff, self.basis_grads)
        sym = grad_v + np.swapaxes(grad_v, 2, 3)
        tn = np.einsum("egcd,ed->egc", sym, self.normals)  # (grad v + grad v^T) n
        tn_n = np.einsum("egc,ec->eg", tn, self.normals)  # normal component
        tangential = tn - tn_n[:, :, None] * self.normals[:, None, :]
        # 2-point Gauss on each edge: equal weights length/2
        return mu * 0.5 * np.einsum("e,egc->c", self.lengths, tangential)


def wall_shear_stress(
    v: FlowField,
    mesh: Mesh = None,
    params: FlowParams = None,
    sigma0: float = 1.0,
    traction: WallTraction = None,
) -> np.ndarray:
    """Normalized wall shear stress vector sigma_wss of one flow snapshot."""
    if traction is None:
        traction = WallTraction(v.space)
    return traction.traction_integral(v.u, params.mu) / sigma0


def reaction(sigma_wss, u: float) -> float:
    """Growth rate R = (1+u)^-1 (1+|sigma|^2)^-1, always in (0, 1]."""
    if u < 0:
        raise NegativeConcentration("concentration must be nonnegative")
    sigma_wss = np.asarray(sigma_wss, dtype=np.float64)
    return float(1.0 / ((1.0 + u) * (1.0 + float(sigma_wss @ sigma_wss))))


def period_averaged_reaction(
    traj: PeriodicTrajectory,
    U: float,
    dt: float = None,
    mesh: Mesh = None,
    params: FlowParams = None,
    sigma0: float = 1.0,
) -> float:
    """dt * sum of R over the trajectory samples t_1 .. t_N.

    math.fsum makes the average invariant under cyclic relabeling of the
    samples.
    """
    n = traj.steps_per_period
    dt = 1.0 / n if dt is None else dt
    traction = WallTraction(traj.fields[0].space)
    values = [
        reaction(
            wall_shear_stress(f, params=params, sigma0=sigma0, traction=traction), U
        )
        for f in traj.fields[1:]
    ]
    return dt * math.fsum(values)


def macro_step(
    state: MacroState,
    R_avg: float,
    dT: float,
    epsilon: float,
    periodicity_residual: float = 0.0,
    cycles: int = 0,
    seconds: float = 0.0,
) -> MacroState:
    """One explicit-Euler macro step U += dT * epsilon * R_avg."""
    if not 0 < R_avg <= 1:
        raise ValueError("period-averaged reaction must lie in (0, 1]")
    record = MacroRecord(
        m=len(state.history) + 1,
        T_m=state.T_m + dT,
        U=state.U + dT * epsilon * R_avg,
        R_avg=R_avg,
        periodicity_residual=periodicity_residual,
        cycles=cycles,
        seconds=seconds,
    )
    return MacroState(
        U=record.U, T_m=record.T_m, history=state.history + (record,)
    )


@dataclass(frozen=True)
class MultiscaleResult:
    state: MacroState
    diagnostics: RunDiagnostics


@dataclass(frozen=True)
class DirectResult:
    samples: tuple  # (t, u) pairs, including (0, u0)
    diagnostics: RunDiagnostics


def _annotate(exc, m):
    exc.macro_step_index = m
    return exc


def run_multiscale(
    config, snapshot_callback: Callable = None, progress: Callable = None
) -> MultiscaleResult:
    """Front-tracking multiscale loop over M = T/dT macro steps.

    Each step deforms the reference mesh to the current concentration,
    finds the time-periodic flow (warm-started from the previous step's
    orbit), averages the reaction over one period, and advances U by
    explicit Euler. snapshot_callback(record, mesh, field), when given, is
    invoked with the mid-period field at every macro time listed in
    config.snapshots.
    """
    growth = config.growth_params()
    n_steps = growth.steps_per_period
    m_steps = growth.macro_steps
    state = MacroState(U=config.u0, T_m=0.0)
    diagnostics = RunDiagnostics()

    if config.flow_model == "zero":
        for m in range(1, m_steps + 1):
            t0 = time.perf_counter()
            r_avg = reaction(np.zeros(2), state.U)
            state = macro_step(
                state,
                r_avg,
                growth.dT,
                growth.epsilon,
                seconds=time.perf_counter() - t0,
            )
        return MultiscaleResult(state=state, diagnostics=diagnostics)

    reference = build_reference_mesh(config.a, config.b, config.nx, config.ny)
    shape = config.shape_function()
    params = config.flow_params()
    bc = experiment_bc(params)
    prev_traj = None
    prev_space = None
    for m in range(1, m_steps + 1):
        t0 = time.perf_counter()
        try:
            mesh = deform_mesh(reference, state.U, shape)
            space = FunctionSpace(mesh, like=prev_space)
            prev_space = space
            if prev_traj is None:
                guess = zero_field(space)
            else:
                guess = warm_start(prev_traj, space)
            traj = find_periodic_solution(
                guess,
                n_steps,
                tau=config.tau,
                max_cycles=config.max_cycles,
                params=params,
                bc=bc,
                picard_tol=config.picard_tol,
            )
            r_avg = period_averaged_reaction(
                traj, state.U, growth.dt, mesh, params, growth.sigma0
            )
        except Exception as exc:
            raise _annotate(exc, m)
        diagnostics = diagnostics.absorb_trajectory(traj)
        state = macro_step(
            state,
            r_avg,
            growth.dT,
            growth.epsilon,
            periodicity_residual=traj.periodicity_residual,
            cycles=traj.cycles_used,
            seconds=time.perf_counter() - t0,
        )
        prev_traj = traj
        if progress is not None:
            progress(state.history[-1])
        if snapshot_callback is not None and any(
            abs(state.T_m - s) <= 0.5 * growth.dT for s in config.snapshots
        ):
            mid = traj.fields[len(traj.fields) // 2]  # peak-inflow snapshot
            snapshot_callback(state.history[-1], mesh, mid)
    return MultiscaleResult(state=state, diagnostics=diagnostics)


def run_direct(config, T_short: float) -> DirectResult:
    """Fully resolved reference coupling of flow and growth.

    Advances the flow one micro step on the current domain, updates the
    concentration with the instantaneous reaction, then deforms the mesh
    to the new concentration, every micro step.
    """
    growth = config.growth_params()
    n_steps = growth.steps_per_period
    dt = growth.dt
    total = round(T_short * n_steps)
    if abs(total * dt - T_short) > 1e-9 * max(1.0, T_short):
        raise ValueError("T_short must be a multiple of dt")
    u = config.u0
    samples = [(0.0, u)]
    diagnostics = RunDiagnostics()

    if config.flow_model == "zero":
        for k in range(1, total + 1):
            u = u + dt * growth.epsilon * reaction(np.zeros(2), u)
            samples.append((k * dt, u))
        return DirectResult(samples=tuple(samples), diagnostics=diagnostics)

    reference = build_reference_mesh(config.a, config.b, config.nx, config.ny)
    shape = config.shape_function()
    params = config.flow_params()
    bc = experiment_bc(params)

    mesh = deform_mesh(reference, u, shape)
    space = FunctionSpace(mesh)
    traction = WallTraction(space)
    field = zero_field(space)
    previous = None
    for k in range(1, total + 1):
        guess = None
        if previous is not None:
            guess = FlowField(
                space, 2.0 * field.u - previous.u, 2.0 * field.p - previous.p,
                field.time,
            )
        previous = field
        field = micro_step(
            field,
            k * dt,
            dt,
            params,
            bc,
            picard_tol=config.picard_tol,
            initial_guess=guess,
        )
        diagnostics = diagnostics.absorb_field(field)
        sigma = traction.traction_integral(field.u, params.mu) / growth.sigma0
        u = u + dt * growth.epsilon * reaction(sigma, u)
        samples.append((k * dt, u))
        if k < total:
            mesh = deform_mesh(reference, u, shape)
            space = FunctionSpace(mesh, like=space)
            traction = WallTraction(space, template=traction)
            field = FlowField(space, field.u.copy(), field.p.copy(), field.time)
            previous = FlowField(
                space, previous.u.copy(), previous.p.copy(), previous.time
            )
    return DirectResult(samples=tuple(samples), diagnostics=diagnostics)
