"""Convergence-study harness: error tables against a fine reference.

Errors are measured as |U(T) - U_ref(T)| of self-computed runs (the
reference uses finer steps on the studied axis), and observed orders as
log2 ratios of successive errors under halving, matching the protocol the
error table of Table 1-style studies uses.
"""

from __future__ import annotations

import concurrent.futures
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .growth import RunDiagnostics, run_multiscale

AXES = ("dt", "dT", "eps")
_AXIS_FIELD = {"dt": "dt", "dT": "dT", "eps": "epsilon"}


@dataclass(frozen=True)
class StudyRow:
    value: float
    u_final: float
    error: float
    order: Optional[float]  # None on the first (coarsest) row
    seconds: float


@dataclass(frozen=True)
class ConvergenceReport:
    axis: str
    rows: tuple
    reference: str
    reference_u: float
    diagnostics: RunDiagnostics

    def orders(self):
        return [r.order for r in self.rows if r.order is not None]


def _run_cell(config):
    t0 = time.perf_counter()
    result = run_multiscale(config)
    return result.state.U, time.perf_counter() - t0, result.diagnostics


def _merge(diags):
    merged = RunDiagnostics()
    for d in diags:
        merged = RunDiagnostics(
            max_div_residual=max(merged.max_div_residual, d.max_div_residual),
            max_periodicity_residual=max(
                merged.max_periodicity_residual, d.max_periodicity_residual
            ),
            max_cycles=max(merged.max_cycles, d.max_cycles),
            max_picard_iterations=max(
                merged.max_picard_iterations, d.max_picard_iterations
            ),
        )
    return merged


def convergence_study(
    base, axis: str, values, reference, threads: int = 1
) -> ConvergenceReport:
    """Run one study axis: one cell per value plus the fine reference.

    For the dt and dT axes a single reference run serves every cell; on
    the eps axis the reference is re-run epsilon-matched per cell (with
    the reference's finer macro/micro steps), since U itself depends on
    epsilon. values must be sorted decreasing and the reference strictly
    finer than every value on the studied axis.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    values = [float(v) for v in values]
    if any(values[i] <= values[i + 1] for i in range(len(values) - 1)):
        raise ValueError("values must be sorted in decreasing order")
    field = _AXIS_FIELD[axis]
    if axis in ("dt", "dT"):
        if getattr(reference, field) >= min(values):
            raise ValueError(f"reference {axis} must be finer than every value")
    else:
        if reference.dT > base.dT or reference.dt > base.dt:
            raise ValueError("eps reference must not be coarser in dT or dt")
        if reference.dT == base.dT and reference.dt == base.dt:
            raise ValueError("eps reference must be strictly finer in dT or dt")

    cells = [base.with_overrides(**{field: v}) for v in values]
    if axis == "eps":
        refs = [reference.with_overrides(epsilon=v) for v in values]
    else:
        refs = [reference]
    configs = cells + refs

    if threads > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_run_cell, configs))
    else:
        outcomes = [_run_cell(c) for c in configs]

    cell_out = outcomes[: len(cells)]
    ref_out = outcomes[len(cells) :]
    errors = []
    for i in range(len(cells)):
        u_ref = ref_out[i][0] if axis == "eps" else ref_out[0][0]
        errors.append(abs(cell_out[i][0] - u_ref))
    rows = []
    for i, v in enumerate(values):
        order = None
        if i > 0 and errors[i] > 0 and errors[i - 1] > 0:
            order = math.log2(errors[i - 1] / errors[i])
        rows.append(
            StudyRow(
                value=v,
                u_final=cell_out[i][0],
                error=errors[i],
                order=order,
                seconds=cell_out[i][1],
            )
        )
    ref_desc = (
        f"reference: dT={reference.dT:g}, dt={reference.dt:g}"
        + (", epsilon-matched" if axis == "eps" else f", epsilon={reference.epsilon:g}")
    )
    return ConvergenceReport(
        axis=axis,
        rows=tuple(rows),
        reference=ref_desc,
        reference_u=ref_out[0][0],
        diagnostics=_merge([o[2] for o in outcomes]),
    )


def write_report_csv(report: ConvergenceReport, path) -> None:
    lines = ["value,error,order,seconds"]
    for r in report.rows:
        order = "" if r.order is None else f"{r.order:.17g}"
        lines.append(f"{r.value:.17g},{r.error:.17g},{order},{r.seconds:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_report_text(report: ConvergenceReport, path) -> None:
    header = f"{report.axis:>12s} {'error':>14s} {'order':>8s} {'seconds':>9s}"
    lines = [report.reference, header, "-" * len(header)]
    for r in report.rows:
        order = "" if r.order is None else f"{r.order:8.2f}"
        lines.append(f"{r.value:12.6g} {r.error:14.6e} {order:>8s} {r.seconds:9.1f}")
    Path(path).write_text("\n".join(lines) + "\n")
