"""Channel triangulation and vertical front tracking.

The flow domain is {(x, y): |x| < a, |y| < b - gamma(U, x)} for a bump
function gamma. A fixed reference triangulation of [-a, a] x [-b, b] is
deformed by scaling each vertex's y coordinate with (b - gamma(U, x)) / b,
so connectivity, boundary tags and triangle orientation never change and
fields transfer between macro steps by shared coefficients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainCollapse, PinchWarning

TAG_INFLOW = "inflow"
TAG_OUTFLOW = "outflow"
TAG_WALL_TOP = "wall_top"
TAG_WALL_BOTTOM = "wall_bottom"
WALL_TAGS = (TAG_WALL_TOP, TAG_WALL_BOTTOM)
ALL_TAGS = (TAG_INFLOW, TAG_OUTFLOW, TAG_WALL_TOP, TAG_WALL_BOTTOM)

# Fraction of the half-height at which a pinch warning fires.
PINCH_WARN_FRACTION = 0.95


@dataclass(frozen=True)
class GaussianBump:
    """Height reduction gamma(u, x) = u * exp(-x^2)."""

    def __call__(self, u: float, x):
        return u * np.exp(-np.square(np.asarray(x, dtype=np.float64)))

    def peak(self, u: float) -> float:
        """Maximum of gamma(u, .) over all x (attained at x = 0)."""
        return float(u)


@dataclass(frozen=True)
class Mesh:
    """Triangulated channel with tagged boundary edges.

    vertices:       (nv, 2) coordinates
    triangles:      (nt, 3) vertex indices, positively oriented
    boundary_edges: (nbe, 2) vertex index pairs
    boundary_tags:  tag per boundary edge, from ALL_TAGS
    half_length:    reference half-length a (x in [-a, a])
    half_height:    reference half-height b of the undeformed channel
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: tuple
    half_length: float
    half_height: float

    def __post_init__(self):
        for arr in (self.vertices, self.triangles, self.boundary_edges):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def triangle_areas(self) -> np.ndarray:
        """Signed areas; positive for correctly oriented triangles."""
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def area(self) -> float:
        return float(np.sum(self.triangle_areas()))

    def edges_with_tag(self, tag: str) -> np.ndarray:
        mask = np.array([t == tag for t in self.boundary_tags])
        return self.boundary_edges[mask]


@dataclass(frozen=True)
class WallEdge:
    """One wall boundary edge with its outward geometry."""

    vertices: tuple  # (v0, v1) vertex indices
    normal: np.ndarray  # outward unit normal
    length: float
    tag: str
    triangle: int  # index of the unique adjacent triangle


def build_reference_mesh(a: float, b: float, nx: int, ny: int) -> Mesh:
    """Structured criss-cross triangulation of [-a, a] x [-b, b].

    Each of the nx * ny grid quads is split along the same diagonal,
    giving 2 * nx * ny positively oriented triangles.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be at least 1")
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")

    xs = np.linspace(-a, a, nx + 1)
    ys = np.linspace(-b, b, ny + 1)
    xg, yg = np.meshgrid(xs, ys)  # row j = constant y
    vertices = np.column_stack([xg.ravel(), yg.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    va = vid(ii, jj)
    vb = vid(ii + 1, jj)
    vc = vid(ii + 1, jj + 1)
    vd = vid(ii, jj + 1)
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([va, vb, vc])
    triangles[1::2] = np.column_stack([va, vc, vd])

    edges = []
    tags = []
    for i in range(nx):
        edges.append((vid(i, 0), vid(i + 1, 0)))
        tags.append(TAG_WALL_BOTTOM)
        edges.append((vid(i, ny), vid(i + 1, ny)))
        tags.append(TAG_WALL_TOP)
    for j in range(ny):
        edges.append((vid(0, j), vid(0, j + 1)))
        tags.append(TAG_INFLOW)
        edges.append((vid(nx, j), vid(nx, j + 1)))
        tags.append(TAG_OUTFLOW)

    return Mesh(
        vertices=vertices,
        triangles=triangles,
        boundary_edges=np.asarray(edges, dtype=np.int64),
        boundary_tags=tuple(tags),
        half_length=float(a),
        half_height=float(b),
    )


def deform_mesh(reference: Mesh, U: float, shape=GaussianBump()) -> Mesh:
    """Deform the reference channel to the domain of concentration U.

    Each reference vertex (x, y) maps to (x, y * (b - gamma(U, x)) / b).
    Raises DomainCollapse when the bump pinches the channel shut and warns
    once the bump exceeds PINCH_WARN_FRACTION of the half-height.
    """
    if U < 0:
        raise ValueError("concentration U must be nonnegative")
    b = reference.half_height
    peak = shape.peak(U)
    if peak >= b:
        raise DomainCollapse(
            f"bump height {peak:g} reached the channel half-height {b:g}"
        )
    if peak >= PINCH_WARN_FRACTION * b:
        warnings.warn(
            f"bump height {peak:g} exceeds {PINCH_WARN_FRACTION:.0%} of the "
            f"half-height {b:g}; mesh quality degrades",
            PinchWarning,
            stacklevel=2,
        )
    x = reference.vertices[:, 0]
    y = reference.vertices[:, 1]
    scale = (b - shape(U, x)) / b
    vertices = np.column_stack([x, y * scale])
    return Mesh(
        vertices=vertices,
        triangles=reference.triangles,
        boundary_edges=reference.boundary_edges,
        boundary_tags=reference.boundary_tags,
        half_length=reference.half_length,
        half_height=reference.half_height,
    )


def boundary_edge_triangles(mesh: Mesh) -> np.ndarray:
    """Index of the unique triangle adjacent to each boundary edge."""
    owner = {}
    tri = mesh.triangles
    for t in range(tri.shape[0]):
        for k in range(3):
            key = frozenset((int(tri[t, k]), int(tri[t, (k + 1) % 3])))
            owner.setdefault(key, []).append(t)
    adjacent = np.empty(mesh.boundary_edges.shape[0], dtype=np.int64)
    for e, (v0, v1) in enumerate(mesh.boundary_edges):
        owners = owner.get(frozenset((int(v0), int(v1))), [])
        if len(owners) != 1:
            raise ValueError(
                f"boundary edge ({v0}, {v1}) belongs to {len(owners)} triangles"
            )
        adjacent[e] = owners[0]
    return adjacent


def wall_edges(mesh: Mesh) -> list[WallEdge]:
    """Wall edges with outward unit normals and lengths.

    The normal is chosen perpendicular to the edge and pointing away from
    the adjacent triangle's centroid, i.e. out of the flow domain.
    """
    adjacent = boundary_edge_triangles(mesh)
    result = []
    for e, (v0, v1) in enumerate(mesh.boundary_edges):
        tag = mesh.boundary_tags[e]
        if tag not in WALL_TAGS:
            continue
        p0 = mesh.vertices[v0]
        p1 = mesh.vertices[v1]
        edge = p1 - p0
        length = float(np.hypot(edge[0], edge[1]))
        normal = np.array([edge[1], -edge[0]]) / length
        centroid = mesh.vertices[mesh.triangles[adjacent[e]]].mean(axis=0)
        midpoint = 0.5 * (p0 + p1)
        if np.dot(normal, midpoint - centroid) < 0:
            normal = -normal
        result.append(
            WallEdge(
                vertices=(int(v0), int(v1)),
                normal=normal,
                length=length,
                tag=tag,
                triangle=int(adjacent[e]),
            )
        )
    return result
