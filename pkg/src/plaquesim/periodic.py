"""Time-periodic flow on a fixed domain, found by cycle marching.

The period map propagates a start field through one full period of N
implicit-Euler steps; its fixed point is the time-periodic solution. Plain
cycle marching (power iteration on the period map) converges here because
the flow is dissipative and perturbations wash out through the outflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConnectivityMismatch, NonlinearDivergence, PeriodicityNotReached
from .fem import (
    BoundarySpec,
    FlowField,
    FlowParams,
    FunctionSpace,
    field_difference_norm,
    micro_step,
)
from .meshing import Mesh

DEFAULT_TOLERANCE = 1e-6
DEFAULT_MAX_CYCLES = 100


@dataclass(frozen=True)
class PeriodicTrajectory:
    """One period of fields t = 0, 1/N, ..., 1 with its periodicity defect.

    periodicity_residual is the H1 distance between the last and first
    field; residual_history records it for every marched cycle.
    """

    fields: tuple
    periodicity_residual: float
    cycles_used: int
    residual_history: tuple

    @property
    def steps_per_period(self) -> int:
        return len(self.fields) - 1

    @property
    def max_div_residual(self) -> float:
        return max(
            (f.div_residual for f in self.fields if f.div_residual is not None),
            default=0.0,
        )

    @property
    def max_picard_iterations(self) -> int:
        return max(f.picard_iterations for f in self.fields)


def run_one_period(
    start: FlowField,
    N: int,
    params: FlowParams,
    bc: BoundarySpec,
    picard_tol: float = None,
) -> list[FlowField]:
    """March N micro steps of size 1/N from the start field at t = 0.

    Each step is warm-started by linear extrapolation of the two previous
    fields, which does not change the computed solutions, only how fast
    the nonlinear iteration finds them. Solver failures are re-raised with
    the failing step index attached.
    """
    if N < 1:
        raise ValueError("steps per period must be at least 1")
    if start.time != 0.0:
        raise ValueError("the start field must be stamped at time 0")
    dt = 1.0 / N
    fields = [start]
    previous = None
    kwargs = {} if picard_tol is None else {"picard_tol": picard_tol}
    for n in range(1, N + 1):
        guess = None
        if previous is not None:
            current = fields[-1]
            guess = FlowField(
                current.space,
                2.0 * current.u - previous.u,
                2.0 * current.p - previous.p,
                current.time,
            )
        previous = fields[-1]
        try:
            fields.append(
                micro_step(
                    fields[-1], n * dt, dt, params, bc, initial_guess=guess, **kwargs
                )
            )
        except Exception as exc:
            if hasattr(exc, "step_index"):
                exc.step_index = n
            raise
    return fields


def find_periodic_solution(
    initial_guess: FlowField,
    N: int,
    tau: float = DEFAULT_TOLERANCE,
    max_cycles: int = DEFAULT_MAX_CYCLES,
    params: FlowParams = None,
    bc: BoundarySpec = None,
    picard_tol: float = None,
    anderson_depth: int = 3,
) -> PeriodicTrajectory:
    """March whole periods until the period map is a fixed point to tau (H1).

    The first two cycles feed the end field straight back as the next
    start (plain marching). Later starts are Anderson-mixed from the
    recent (start, end - start) pairs, which both cuts the cycle count and
    still converges once the plaque has narrowed the channel enough that
    the periodic orbit is no longer an attractor of the period map; plain
    power iteration cannot converge there at all. Set anderson_depth=0 for
    strictly plain marching. Raises PeriodicityNotReached with the last
    residual when max_cycles whole periods were not enough.
    """
    if tau < 0:
        raise ValueError("tolerance must be nonnegative")
    if max_cycles < 1:
        raise ValueError("max_cycles must be at least 1")
    start = initial_guess
    history = []
    starts: list[np.ndarray] = []  # velocity starts fed into the period map
    residuals: list[np.ndarray] = []  # end - start velocity coefficients
    beta = 1.0
    mixed = False  # whether the current start came from mixing
    fallback = None  # last genuinely marched end field
    for cycle in range(1, max_cycles + 1):
        try:
            fields = run_one_period(start, N, params, bc, picard_tol=picard_tol)
        except NonlinearDivergence:
            if not mixed or fallback is None:
                raise
            # the mixed start was unphysical; resume plain marching from the
            # last genuine end state with gentler mixing
            starts.clear()
            residuals.clear()
            beta = max(0.5 * beta, 0.125)
            start = fallback
            mixed = False
            history.append(history[-1] if history else np.inf)
            continue
        residual = field_difference_norm(fields[-1], fields[0], "H1")
        history.append(residual)
        if residual <= tau:
            return PeriodicTrajectory(
                fields=tuple(fields),
                periodicity_residual=residual,
                cycles_used=cycle,
                residual_history=tuple(history),
            )

        space = fields[0].space
        fallback = fields[-1].with_time(0.0)
        x = fields[0].u.copy()
        r = fields[-1].u - x
        if len(history) >= 2 and residual > 2.0 * min(history[:-1]):
            # mixing went astray; restart the history from this point
            starts.clear()
            residuals.clear()
            beta = max(0.5 * beta, 0.125)
        starts.append(x)
        residuals.append(r)
        if len(starts) > anderson_depth + 1:
            starts.pop(0)
            residuals.pop(0)

        next_u = fields[-1].u  # plain marching: feed the end field back
        mixed = False
        if anderson_depth > 0 and len(starts) >= 2 and cycle >= 2:
            # least-squares combination of recent cycles minimizing the
            # linearized periodicity defect (Anderson mixing)
            r_last = residuals[-1]
            dr = np.stack([ri - r_last for ri in residuals[:-1]], axis=1)
            gamma, *_ = np.linalg.lstsq(dr, -r_last, rcond=1e-8)
            gamma = np.clip(gamma, -2.0, 2.0)
            x_mix = starts[-1] + beta * r_last
            for g, xi, ri in zip(gamma, starts[:-1], residuals[:-1]):
                x_mix += g * ((xi + beta * ri) - (starts[-1] + beta * r_last))
            # reject wild extrapolations, they can break the micro solver
            scale = float(np.max(np.abs(next_u))) + 1.0
            if np.max(np.abs(x_mix - next_u)) <= 0.5 * scale:
                next_u = x_mix
                mixed = True

        start = FlowField(space, next_u.copy(), fields[-1].p.copy(), time=0.0)
    raise PeriodicityNotReached(
        f"period map residual {history[-1]:.3e} above tolerance {tau:.3e} "
        f"after {max_cycles} cycles",
        residual=history[-1],
        cycles=max_cycles,
    )


def warm_start(previous: PeriodicTrajectory, target) -> FlowField:
    """Re-bind the previous trajectory's initial field to a new mesh.

    Under front tracking the deformed mesh shares connectivity with the
    old one, so coefficients transfer verbatim. target may be a Mesh or an
    already-built FunctionSpace.
    """
    space = target if isinstance(target, FunctionSpace) else FunctionSpace(target)
    old = previous.fields[0]
    if not old.space.same_connectivity(space):
        raise ConnectivityMismatch(
            "target mesh does not share connectivity with the trajectory's mesh"
        )
    return FlowField(space, old.u.copy(), old.p.copy(), time=0.0)


def write_residual_log(trajectory: PeriodicTrajectory, path) -> None:
    """Per-cycle residual log as CSV (cycle index, residual)."""
    with open(path, "w") as fh:
        fh.write("cycle,residual\n")
        for i, r in enumerate(trajectory.residual_history, start=1):
            fh.write(f"{i},{r:.17g}\n")
