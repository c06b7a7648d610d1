import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plaquesim.errors import DimensionMismatch, NonlinearDivergence
from plaquesim.fem import (
    FlowField,
    FlowParams,
    FunctionSpace,
    assemble_constant_operators,
    assemble_convection,
    coefficient_norm,
    experiment_bc,
    field_difference_norm,
    interpolate_pressure,
    interpolate_velocity,
    micro_step,
    pulsatile_inflow,
    steady_inflow,
    validation_bc,
    zero_field,
)
from plaquesim.meshing import Mesh, build_reference_mesh, deform_mesh

A, B, AMP = 5.0, 2.0, 20.0


def channel_space(nx=6, ny=2, a=A, b=B, U=0.0):
    mesh = deform_mesh(build_reference_mesh(a, b, nx, ny), U)
    return FunctionSpace(mesh)


def single_triangle_space():
    mesh = Mesh(
        vertices=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
        triangles=np.array([[0, 1, 2]]),
        boundary_edges=np.array([[0, 1], [1, 2], [2, 0]]),
        boundary_tags=("wall_bottom", "outflow", "inflow"),
        half_length=0.5,
        half_height=0.5,
    )
    return FunctionSpace(mesh)


def sympy_p2_mass_matrix():
    """Exact P2 mass matrix on the unit reference triangle."""
    import sympy as sp

    x, y = sp.symbols("x y")
    l0, l1, l2 = 1 - x - y, x, y
    basis = [
        l0 * (2 * l0 - 1),
        l1 * (2 * l1 - 1),
        l2 * (2 * l2 - 1),
        4 * l0 * l1,
        4 * l1 * l2,
        4 * l2 * l0,
    ]
    m = sp.zeros(6, 6)
    for i in range(6):
        for j in range(6):
            m[i, j] = sp.integrate(
                sp.integrate(basis[i] * basis[j], (y, 0, 1 - x)), (x, 0, 1)
            )
    return np.array(m, dtype=float)


def test_single_triangle_mass_matches_symbolic_integrals():
    space = single_triangle_space()
    ops = assemble_constant_operators(space)
    exact = sympy_p2_mass_matrix()
    nodes = space.n_vnodes
    got = ops["M"].toarray()[:nodes, :nodes]
    # global edge-midpoint numbering is sorted, so local nodes
    # [m01, m12, m20] sit at global slots [3, 5, 4]
    perm = [0, 1, 2, 3, 5, 4]
    assert np.max(np.abs(got - exact[np.ix_(perm, perm)])) < 1e-14
    # vertex diagonal entry equals area/30 with area = 1/2
    assert math.isclose(got[0, 0], 0.5 / 30.0, rel_tol=1e-12)


def test_mass_is_spd_and_stiffness_psd_with_constant_kernel():
    space = channel_space(3, 2)
    ops = assemble_constant_operators(space)
    m = ops["M"].toarray()
    k = ops["K"].toarray()
    assert np.allclose(m, m.T, atol=1e-13)
    assert np.allclose(k, k.T, atol=1e-13)
    assert np.min(np.linalg.eigvalsh(m)) > 0
    eigs = np.linalg.eigvalsh(k)
    assert eigs[0] > -1e-12
    # kernel: independent constant translation of each component
    const = np.ones(space.n_velocity_dofs)
    assert np.max(np.abs(ops["K"].matvec(const))) < 1e-12


def test_divergence_annihilates_constants_and_divfree_interpolant():
    space = channel_space(4, 2)
    ops = assemble_constant_operators(space)
    const = np.ones(space.n_velocity_dofs)
    assert np.max(np.abs(ops["B"].matvec(const))) < 1e-12
    shear = interpolate_velocity(space, lambda x, y: (y, np.zeros_like(y)))
    assert np.linalg.norm(ops["B"].matvec(shear)) < 1e-12


def test_convection_of_zero_field_is_zero():
    space = channel_space(3, 1)
    n = assemble_convection(space, np.zeros(space.n_velocity_dofs))
    assert n.nnz == 0 or np.max(np.abs(n.data)) == 0.0


def test_convection_constant_transport_oracle():
    # w = (1, 0), v = interpolant of (x, 0): (w . grad) v = (1, 0), so
    # N(w) v must equal M applied to the interpolant of (1, 0)
    space = channel_space(4, 2)
    ops = assemble_constant_operators(space)
    w = interpolate_velocity(space, lambda x, y: (np.ones_like(x), np.zeros_like(y)))
    v = interpolate_velocity(space, lambda x, y: (x, np.zeros_like(y)))
    ones = interpolate_velocity(
        space, lambda x, y: (np.ones_like(x), np.zeros_like(y))
    )
    lhs = assemble_convection(space, w).matvec(v)
    rhs = ops["M"].matvec(ones)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_convection_skew_symmetry_on_two_cell_mesh():
    # pointwise divergence-free w and a field vanishing on the whole
    # boundary: (N(w) v, v) = 0 up to quadrature round-off
    space = channel_space(1, 1, a=1.0, b=1.0)
    w = interpolate_velocity(space, lambda x, y: (-y, x))  # rigid rotation
    n = assemble_convection(space, w)
    boundary = set()
    for tag in ("inflow", "outflow", "wall_top", "wall_bottom"):
        boundary.update(space.dirichlet_nodes(tag).tolist())
    interior = [i for i in range(space.n_vnodes) if i not in boundary]
    assert interior  # the diagonal midpoint node
    rng = np.random.default_rng(5)
    v = np.zeros(space.n_velocity_dofs)
    for node in interior:
        v[node] = rng.standard_normal()
        v[node + space.n_vnodes] = rng.standard_normal()
    quad = float(v @ n.matvec(v))
    assert abs(quad) <= 1e-10 * float(v @ v)


def poiseuille_exact(space, params):
    v = interpolate_velocity(
        space, lambda x, y: (AMP * (1 - (y / B) ** 2), np.zeros_like(y))
    )
    grad = -2.0 * params.mu * AMP / B**2
    p = interpolate_pressure(space, lambda x, y: grad * (x - A))
    return v, p


def test_zero_data_gives_zero_field():
    space = channel_space(3, 2)
    params = FlowParams(rho=1.0, nu=0.04, inflow=lambda t, y: np.zeros_like(y))
    bc = experiment_bc(params)
    out = micro_step(zero_field(space), 0.5, 0.25, params, bc)
    assert np.max(np.abs(out.u)) < 1e-12
    assert np.max(np.abs(out.p)) < 1e-12


def test_poiseuille_is_fixed_point_of_micro_step():
    space = channel_space(6, 2)
    params = FlowParams(rho=1.0, nu=0.04, inflow=steady_inflow(AMP, B))
    bc = experiment_bc(params)
    v, p = poiseuille_exact(space, params)
    start = FlowField(space, v, p, time=0.0)
    out = micro_step(start, 1.0, 0.5, params, bc)
    assert np.max(np.abs(out.u - v)) < 1e-9
    assert out.div_residual < 1e-9


def march_to_steady(space, params, bc, dt=0.5, limit=200):
    f = zero_field(space)
    for _ in range(limit):
        nxt = micro_step(f, 1.0, dt, params, bc)
        if np.max(np.abs(nxt.u - f.u)) < 1e-11:
            return nxt
        f = nxt
    return f


def test_steady_poiseuille_reached_from_rest():
    space = channel_space(10, 2)
    params = FlowParams(rho=1.0, nu=0.04, inflow=steady_inflow(AMP, B))
    bc = experiment_bc(params)
    steady = march_to_steady(space, params, bc)
    v, p = poiseuille_exact(space, params)
    assert np.max(np.abs(steady.u - v)) <= 1e-8
    assert np.max(np.abs(steady.p - p)) <= 1e-8


def test_micro_step_dirichlet_values_exact():
    space = channel_space(5, 2)
    params = FlowParams(rho=1.0, nu=0.04, inflow=pulsatile_inflow(AMP, B))
    bc = experiment_bc(params)
    t = 0.3
    out = micro_step(zero_field(space), t, 0.25, params, bc)
    inflow_nodes = space.dirichlet_nodes("inflow")
    wall_nodes = set()
    for tag in ("wall_top", "wall_bottom"):
        wall_nodes.update(space.dirichlet_nodes(tag).tolist())
    for node in inflow_nodes:
        y = space.vnode_xy[node, 1]
        expected = 0.0 if node in wall_nodes else params.inflow(t, y)
        assert out.u[node] == expected
        assert out.u[node + space.n_vnodes] == 0.0


def test_nonlinear_divergence_reported():
    space = channel_space(6, 2)
    params = FlowParams(rho=1.0, nu=0.04, inflow=steady_inflow(AMP, B))
    bc = experiment_bc(params)
    with pytest.raises(NonlinearDivergence):
        micro_step(zero_field(space), 1.0, 1.0, params, bc, picard_max_iter=1)


def test_incompressibility_along_pulsatile_march():
    space = channel_space(6, 2)
    params = FlowParams(rho=1.0, nu=0.04, inflow=pulsatile_inflow(AMP, B))
    bc = experiment_bc(params)
    f = zero_field(space)
    for n in range(1, 9):
        f = micro_step(f, n / 8, 1 / 8, params, bc)
        assert f.div_residual <= 1e-9


def test_validation_mode_zero_dirichlet():
    space = channel_space(4, 2)
    params = FlowParams(rho=1.0, nu=0.04)
    bc = validation_bc()
    force = FlowParams(
        rho=1.0,
        nu=0.04,
        # rotational force (not a gradient), so it cannot be balanced by
        # pressure alone and must drive an interior flow
        body_force=lambda t, x, y: np.column_stack([y, np.zeros_like(y)]),
    )
    out = micro_step(zero_field(space), 0.5, 0.5, force, bc)
    assert np.max(np.abs(out.u)) > 1e-3
    for tag in ("inflow", "outflow", "wall_top", "wall_bottom"):
        for node in space.dirichlet_nodes(tag):
            assert out.u[node] == 0.0
            assert out.u[node + space.n_vnodes] == 0.0
    assert out.p[0] == 0.0  # pinned pressure DOF
    assert out.div_residual <= 1e-9


def test_norms_zero_and_constant():
    space = channel_space(5, 2)
    f = zero_field(space)
    assert field_difference_norm(f, f, "L2") == 0.0
    assert field_difference_norm(f, f, "H1") == 0.0
    const = interpolate_velocity(
        space, lambda x, y: (np.ones_like(x), np.zeros_like(y))
    )
    g = FlowField(space, const, np.zeros(space.n_pressure_dofs), 0.0)
    assert field_difference_norm(g, f, "L2") == pytest.approx(math.sqrt(40.0), rel=1e-12)
    assert field_difference_norm(g, f, "H1") == pytest.approx(math.sqrt(40.0), rel=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_h1_dominates_l2(seed):
    space = channel_space(3, 1)
    rng = np.random.default_rng(seed)
    e = rng.standard_normal(space.n_velocity_dofs)
    assert coefficient_norm(space, e, "H1") >= coefficient_norm(space, e, "L2")


def test_field_norm_dimension_mismatch():
    space_a = channel_space(3, 1)
    space_b = channel_space(4, 1)
    with pytest.raises(DimensionMismatch):
        field_difference_norm(zero_field(space_a), zero_field(space_b))


def test_dof_counts():
    space = channel_space(3, 2)
    nv = space.mesh.n_vertices
    ne = space.n_edges
    assert space.n_velocity_dofs == 2 * (nv + ne)
    assert space.n_pressure_dofs == nv


def test_micro_step_temporal_self_convergence_order():
    # implicit Euler self-convergence at t=1 against a dt/8 reference per
    # value: observed order 1.0 +- 0.2
    space = channel_space(12, 2)
    params = FlowParams(rho=1.0, nu=0.04, inflow=pulsatile_inflow(AMP, B))
    bc = experiment_bc(params)

    def solve(n):
        f = zero_field(space)
        for k in range(1, n + 1):
            f = micro_step(f, k / n, 1.0 / n, params, bc)
        return f

    errors = []
    for n in (4, 8):
        coarse = solve(n)
        fine = solve(8 * n)
        errors.append(field_difference_norm(coarse, fine, "H1"))
    order = math.log2(errors[0] / errors[1])
    assert 0.8 <= order <= 1.2
