import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plaquesim.errors import DomainCollapse, PinchWarning
from plaquesim.meshing import (
    GaussianBump,
    build_reference_mesh,
    boundary_edge_triangles,
    deform_mesh,
    wall_edges,
)


def test_small_channel_counts_and_area():
    mesh = build_reference_mesh(a=5, b=2, nx=2, ny=1)
    assert mesh.n_vertices == 6
    assert mesh.n_triangles == 4
    assert math.isclose(mesh.area(), 40.0, abs_tol=1e-12)


def test_unit_square_split():
    mesh = build_reference_mesh(a=1, b=1, nx=1, ny=1)
    assert mesh.n_triangles == 2
    assert np.allclose(mesh.triangle_areas(), [2.0, 2.0])


def test_element_count_near_426():
    mesh = build_reference_mesh(a=5, b=2, nx=71, ny=3)
    assert mesh.n_triangles == 426


def test_boundary_tags_cover_all_sides():
    mesh = build_reference_mesh(a=5, b=2, nx=4, ny=2)
    tags = set(mesh.boundary_tags)
    assert tags == {"inflow", "outflow", "wall_top", "wall_bottom"}
    inflow = mesh.edges_with_tag("inflow")
    assert np.all(mesh.vertices[inflow.ravel(), 0] == -5.0)
    outflow = mesh.edges_with_tag("outflow")
    assert np.all(mesh.vertices[outflow.ravel(), 0] == 5.0)


def test_every_boundary_edge_has_one_triangle():
    mesh = build_reference_mesh(a=2, b=1, nx=3, ny=2)
    assert boundary_edge_triangles(mesh).shape == (mesh.boundary_edges.shape[0],)


def test_deform_identity_at_zero():
    ref = build_reference_mesh(a=5, b=2, nx=6, ny=2)
    out = deform_mesh(ref, 0.0)
    assert np.array_equal(out.vertices, ref.vertices)


def test_deform_center_vertex():
    ref = build_reference_mesh(a=5, b=2, nx=2, ny=1)
    # vertex at (0, 2) maps to (0, 1) for U = 1: b - gamma = 2 - 1
    out = deform_mesh(ref, 1.0)
    idx = np.where((ref.vertices == [0.0, 2.0]).all(axis=1))[0][0]
    assert np.allclose(out.vertices[idx], [0.0, 1.0], atol=1e-15)


def test_deform_far_vertex_nearly_unchanged():
    ref = build_reference_mesh(a=5, b=2, nx=2, ny=1)
    out = deform_mesh(ref, 1.0)
    idx = np.where((ref.vertices == [5.0, 2.0]).all(axis=1))[0][0]
    expected_y = 2.0 - math.exp(-25.0)
    assert abs(out.vertices[idx, 1] - expected_y) < 1e-15
    assert abs(out.vertices[idx, 1] - 2.0) < 1e-10


def test_wall_vertices_on_deformed_boundary():
    ref = build_reference_mesh(a=5, b=2, nx=9, ny=3)
    shape = GaussianBump()
    out = deform_mesh(ref, 1.3, shape)
    top = out.edges_with_tag("wall_top").ravel()
    x = out.vertices[top, 0]
    y = out.vertices[top, 1]
    assert np.max(np.abs(y - (2.0 - shape(1.3, x)))) < 1e-12


def test_domain_collapse():
    ref = build_reference_mesh(a=5, b=2, nx=4, ny=2)
    with pytest.raises(DomainCollapse):
        deform_mesh(ref, 2.0)


def test_pinch_warning_before_collapse():
    ref = build_reference_mesh(a=5, b=2, nx=4, ny=2)
    with pytest.warns(PinchWarning):
        deform_mesh(ref, 1.95)


def test_negative_concentration_rejected():
    ref = build_reference_mesh(a=5, b=2, nx=4, ny=2)
    with pytest.raises(ValueError):
        deform_mesh(ref, -0.1)


@given(
    u1=st.floats(0.0, 1.8),
    u2=st.floats(0.0, 1.8),
    nx=st.integers(2, 10),
    ny=st.integers(1, 4),
)
@settings(max_examples=40, deadline=None)
def test_deformation_monotone_and_orientation_preserving(u1, u2, nx, ny):
    lo, hi = sorted([u1, u2])
    ref = build_reference_mesh(a=5, b=2, nx=nx, ny=ny)
    mesh_lo = deform_mesh(ref, lo)
    mesh_hi = deform_mesh(ref, hi)
    assert np.all(np.abs(mesh_hi.vertices[:, 1]) <= np.abs(mesh_lo.vertices[:, 1]) + 1e-15)
    assert np.all(mesh_hi.triangle_areas() > 0)


@given(u=st.floats(0.0, 1.9), nx=st.integers(1, 12), ny=st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_deformed_area_matches_boundary_interpolant(u, nx, ny):
    ref = build_reference_mesh(a=5, b=2, nx=nx, ny=ny)
    shape = GaussianBump()
    mesh = deform_mesh(ref, u, shape)
    xs = np.linspace(-5, 5, nx + 1)
    heights = 2.0 * (2.0 - shape(u, xs))
    expected = np.trapezoid(heights, xs)
    assert math.isclose(mesh.area(), expected, rel_tol=0, abs_tol=1e-12)


def test_wall_edges_flat_rectangle():
    mesh = build_reference_mesh(a=5, b=2, nx=2, ny=1)
    edges = {tuple(sorted(e.vertices)): e for e in wall_edges(mesh)}
    top = [e for e in edges.values() if e.tag == "wall_top"]
    bottom = [e for e in edges.values() if e.tag == "wall_bottom"]
    assert all(np.allclose(e.normal, [0, 1]) for e in top)
    assert all(np.allclose(e.normal, [0, -1]) for e in bottom)
    assert all(math.isclose(e.length, 5.0) for e in edges.values())
    total = sum(e.length for e in edges.values())
    assert math.isclose(total, 20.0)


def test_wall_edges_only_walls_returned():
    mesh = build_reference_mesh(a=5, b=2, nx=3, ny=2)
    assert {e.tag for e in wall_edges(mesh)} == {"wall_top", "wall_bottom"}
    assert len(wall_edges(mesh)) == 6


@given(u=st.floats(0.0, 1.8))
@settings(max_examples=30, deadline=None)
def test_deformed_wall_normals_point_outward(u):
    ref = build_reference_mesh(a=5, b=2, nx=8, ny=2)
    mesh = deform_mesh(ref, u)
    for e in wall_edges(mesh):
        assert math.isclose(float(np.linalg.norm(e.normal)), 1.0, abs_tol=1e-12)
        centroid = mesh.vertices[mesh.triangles[e.triangle]].mean(axis=0)
        midpoint = mesh.vertices[list(e.vertices)].mean(axis=0)
        assert float(np.dot(e.normal, midpoint - centroid)) > 0
