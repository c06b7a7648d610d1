"""Output writers: legacy-VTK snapshots and CSV records.

Floats are written with repr-faithful precision so identical runs produce
byte-identical files (timing columns excepted).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .fem import FlowField
from .meshing import Mesh

HISTORY_HEADER = "m,T,U,R_avg,residual,cycles,seconds"


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def write_mesh_vtk(mesh: Mesh, path) -> None:
    """Legacy-VTK ASCII unstructured grid of the triangulation."""
    _write_vtk(path, mesh, point_data=None)


def write_flow_vtk(mesh: Mesh, field: FlowField, path) -> None:
    """Legacy-VTK ASCII with velocity vectors and pressure at vertices."""
    velocity = field.velocity_at_vertices()
    _write_vtk(path, mesh, point_data=(velocity, field.p))


def _write_vtk(path, mesh: Mesh, point_data) -> None:
    nv = mesh.n_vertices
    nt = mesh.n_triangles
    lines = [
        "# vtk DataFile Version 3.0",
        "plaquesim channel",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {nv} double",
    ]
    for x, y in mesh.vertices:
        lines.append(f"{_fmt(x)} {_fmt(y)} 0")
    lines.append(f"CELLS {nt} {4 * nt}")
    for tri in mesh.triangles:
        lines.append(f"3 {tri[0]} {tri[1]} {tri[2]}")
    lines.append(f"CELL_TYPES {nt}")
    lines.extend(["5"] * nt)
    if point_data is not None:
        velocity, pressure = point_data
        lines.append(f"POINT_DATA {nv}")
        lines.append("VECTORS velocity double")
        for vx, vy in velocity:
            lines.append(f"{_fmt(vx)} {_fmt(vy)} 0")
        lines.append("SCALARS pressure double 1")
        lines.append("LOOKUP_TABLE default")
        for p in pressure:
            lines.append(_fmt(p))
    Path(path).write_text("\n".join(lines) + "\n")


def write_history_csv(history, path) -> None:
    """Per-macro-step records with the fixed header m,T,U,R_avg,residual,cycles,seconds."""
    rows = [HISTORY_HEADER]
    for r in history:
        rows.append(
            f"{r.m},{_fmt(r.T_m)},{_fmt(r.U)},{_fmt(r.R_avg)},"
            f"{_fmt(r.periodicity_residual)},{r.cycles},{r.seconds:.3f}"
        )
    Path(path).write_text("\n".join(rows) + "\n")


def write_direct_csv(samples, path) -> None:
    rows = ["t,u"]
    for t, u in samples:
        rows.append(f"{_fmt(t)},{_fmt(u)}")
    Path(path).write_text("\n".join(rows) + "\n")


def write_field_csv(field: FlowField, path) -> None:
    """DOF vector dump (component, node, x, y, value) for test oracles."""
    space = field.space
    rows = ["component,node,x,y,value"]
    off = space.n_vnodes
    for comp, values in (("vx", field.u[:off]), ("vy", field.u[off:])):
        for node, value in enumerate(values):
            x, y = space.vnode_xy[node]
            rows.append(f"{comp},{node},{_fmt(x)},{_fmt(y)},{_fmt(value)}")
    for node, value in enumerate(field.p):
        x, y = space.mesh.vertices[node]
        rows.append(f"p,{node},{_fmt(x)},{_fmt(y)},{_fmt(value)}")
    Path(path).write_text("\n".join(rows) + "\n")
