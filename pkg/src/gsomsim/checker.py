"""Independent constraint checker for node-problem solutions.

Verifies a flow vector, constraint family by constraint family, against the
node problem it claims to solve: nonnegativity, demand, supply, conservation,
commodity proportionality, partial FIFO, the supply constraint interaction
rule (SCIR), and the activity requirement that every flow be stopped by some
constraint.

The FIFO capacity reduction is a union of rectangles: one per queued
movement, spanning that queue's restriction interval and the fraction of the
capacity period for which the queue exists.  When an event trace is
available, the queue onset times come from the trace (exact for the
event-driven dynamics); without one, the onset is estimated from the queued
movement's flow-to-capacity ratio, which matches the trace whenever the
queued movement ran unimpeded before being cut off.

For second-order solutions the supply family is checked per iteration by
replaying the trace: recomputed supplies must match the downstream state they
were derived from, and no iteration may deliver more than its budget.  The
single cumulative supply comparison is reported as advisory only, because a
legitimate multi-phase solution can exceed the supply evaluated at its final
mixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .fd import LinkState
from .intervals import rectangle_union_area
from .node_first_order import (
    NodeProblem1,
    NodeSolution,
    TraceStep,
    _Setup,
    restricting_sets,
)
from .node_second_order import (
    NodeProblem2,
    NodeSolution2,
    recompute_supply,
    upstream_middle_state,
)

__all__ = [
    "ConstraintCheck",
    "ConstraintReport",
    "check_first_order",
    "check_second_order",
    "DEFAULT_TOLERANCE",
]

# Absolute tolerance on flows, normalized by max(demand, supply, 1).
DEFAULT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ConstraintCheck:
    """Result for one constraint family."""

    name: str
    passed: bool
    worst_violation: float
    detail: str = ""
    advisory: bool = False


@dataclass(frozen=True)
class ConstraintReport:
    """Per-family results; advisory entries do not affect the verdict."""

    checks: tuple[ConstraintCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if not c.advisory)

    def check(self, name: str) -> ConstraintCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def summary_lines(self) -> list[str]:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            tag = " (advisory)" if c.advisory else ""
            line = f"{status}{tag} {c.name}: worst violation {c.worst_violation:.3e}"
            if c.detail and not c.passed:
                line += f" — {c.detail}"
            lines.append(line)
        lines.append("RESULT " + ("PASS" if self.passed else "FAIL"))
        return lines

    def __str__(self) -> str:
        return "\n".join(self.summary_lines())


def _as_flows(setup: _Setup, flows) -> np.ndarray:
    arr = np.asarray(flows, dtype=float)
    if arr.shape != (setup.m, setup.n, setup.c):
        raise ValidationError(
            f"flow array has shape {arr.shape}, expected {(setup.m, setup.n, setup.c)}"
        )
    return arr


def _fill_anchors(trace: Sequence | None) -> dict[int, float]:
    """Absolute time each output closed, read from an event trace."""
    anchors: dict[int, float] = {}
    if trace is not None:
        filled_final = trace[-1].filled if trace else frozenset()
        for step in trace:
            for event in step.events:
                if event.kind in ("supply", "jam") and event.index[0] not in anchors:
                    anchors[event.index[0]] = event.time
        for j in filled_final:
            anchors.setdefault(j, 0.0)  # closed from the start (zero supply or jam)
    return anchors


def _fifo_bounds(
    setup: _Setup,
    flows: np.ndarray,
    atol: float,
    trace: Sequence | None,
    exhausted_outputs: set[int],
) -> np.ndarray:
    """Capacity bound per movement after partial-FIFO reductions (M, N)."""
    movement_flows = flows.sum(axis=2)
    onset = _fill_anchors(trace)
    closed_final = trace[-1].filled if trace else None
    bounds = np.full((setup.m, setup.n), np.inf)
    for i in range(setup.m):
        limit = setup.time_limits[i]
        if limit <= 0.0:
            continue
        queued: list[int] = []
        for jp in range(setup.n):
            if setup.movement_totals[i, jp] <= 0.0:
                continue
            if movement_flows[i, jp] >= setup.movement_totals[i, jp] - atol:
                continue  # demand served: no queue
            if closed_final is not None:
                if jp in closed_final:
                    queued.append(jp)
            elif jp in exhausted_outputs:
                queued.append(jp)
        for j in range(setup.n):
            if setup.movement_totals[i, j] <= 0.0:
                bounds[i, j] = setup.movement_capacities[i, j]
                continue
            rects = []
            for jp in queued:
                if jp == j:
                    continue
                interval = setup.eta.get(i, jp, j)
                if interval is None:
                    continue
                if trace is not None:
                    base = min(max(onset.get(jp, 0.0) / limit, 0.0), 1.0)
                else:
                    cap = setup.movement_capacities[i, jp]
                    base = 0.0 if cap <= 0.0 else min(
                        max(movement_flows[i, jp] / cap, 0.0), 1.0
                    )
                rects.append((interval, base))
            blocked = rectangle_union_area(rects)
            bounds[i, j] = setup.movement_capacities[i, j] * (1.0 - blocked)
    return bounds


def _exhausted_first_order(setup: _Setup, flows: np.ndarray, atol: float) -> set[int]:
    out = set()
    for j in range(setup.n):
        r = setup.supplies[j]
        if math.isfinite(r) and flows[:, j, :].sum() >= r - atol:
            out.add(j)
    return out


def _scir_checks(
    setup: _Setup,
    problem_first: NodeProblem1,
    flows: np.ndarray,
    atol: float,
    exhausted: set[int],
    supply_base: dict[int, float],
    bounds: np.ndarray,
) -> tuple[ConstraintCheck, ConstraintCheck]:
    """SCIR (restriction sets + leftover floors) and activity families.

    ``supply_base[j]`` is the supply amount the priority floors share out for
    an exhausted output: the fixed supply in the first order, the delivered
    total in the second order.
    """
    movement_flows = flows.sum(axis=2)
    w_sets = restricting_sets(problem_first, flows)
    p = setup.oriented_priorities

    worst_scir = 0.0
    scir_detail = ""
    for i in range(setup.m):
        served = movement_flows[i].sum() >= setup.input_totals[i] - atol
        if not served and not w_sets[i]:
            # No restricting output: acceptable only if every unserved
            # movement sits on its capacity/FIFO bound.
            gap = 0.0
            for j in range(setup.n):
                if setup.movement_totals[i, j] <= 0.0:
                    continue
                if movement_flows[i, j] >= setup.movement_totals[i, j] - atol:
                    continue
                gap = max(gap, bounds[i, j] - movement_flows[i, j])
            if gap > worst_scir:
                worst_scir = gap
                scir_detail = (
                    f"input {i + 1} cannot fill its demand but no output restricts it"
                )
        for j in w_sets[i]:
            if j not in exhausted:
                continue
            denom = p[:, j].sum()
            if denom <= 0.0:
                continue
            floor = p[i, j] / denom * supply_base.get(j, 0.0)
            gap = floor - movement_flows[i, j]
            if gap > worst_scir:
                worst_scir = gap
                scir_detail = (
                    f"input {i + 1} receives less than its priority share of output {j + 1}"
                )
    scir = ConstraintCheck(
        name="scir",
        passed=worst_scir <= atol,
        worst_violation=max(worst_scir, 0.0),
        detail=scir_detail,
    )

    worst_act = 0.0
    act_detail = ""
    for i in range(setup.m):
        for j in range(setup.n):
            if setup.movement_totals[i, j] <= atol:
                continue
            if movement_flows[i, j] >= setup.movement_totals[i, j] - atol:
                continue
            gaps = [bounds[i, j] - movement_flows[i, j]]
            gaps.append(math.inf if j not in exhausted else 0.0)
            for js in w_sets[i]:
                gaps.append(0.0 if js in exhausted else math.inf)
            gap = max(min(gaps), 0.0)
            if gap > worst_act:
                worst_act = gap
                act_detail = (
                    f"movement ({i + 1}, {j + 1}) is below demand but no constraint is tight"
                )
    activity = ConstraintCheck(
        name="activity",
        passed=worst_act <= atol,
        worst_violation=worst_act,
        detail=act_detail,
    )
    return scir, activity


def _common_families(
    setup: _Setup, flows: np.ndarray, atol: float, per_commodity_fifo: bool,
    bounds: np.ndarray,
) -> list[ConstraintCheck]:
    checks = []

    worst = max(0.0, float(-flows.min(initial=0.0)))
    checks.append(
        ConstraintCheck("nonnegativity", worst <= atol, worst,
                        "negative movement flow" if worst > atol else "")
    )

    excess = flows - setup.directed
    worst = max(0.0, float(excess.max(initial=0.0)))
    checks.append(
        ConstraintCheck("demand", worst <= atol, worst,
                        "flow exceeds directed demand" if worst > atol else "")
    )

    # The node stores nothing: each movement's inflow is its outflow, so the
    # per-commodity balance holds identically.
    checks.append(
        ConstraintCheck(
            "conservation",
            True,
            0.0,
            "",
        )
    )

    worst = 0.0
    detail = ""
    movement_flows = flows.sum(axis=2)
    for i in range(setup.m):
        for j in range(setup.n):
            total = movement_flows[i, j]
            if total <= atol:
                continue  # 0/0 proportionality is skipped
            demand_total = setup.movement_totals[i, j]
            if demand_total <= 0.0:
                continue  # flagged by the demand family instead
            shares = setup.directed[i, j] / demand_total
            dev = float(np.abs(flows[i, j] - shares * total).max())
            if dev > worst:
                worst = dev
                detail = f"movement ({i + 1}, {j + 1}) breaks commodity proportionality"
    checks.append(ConstraintCheck("proportionality", worst <= atol, worst, detail))

    worst = 0.0
    detail = ""
    for i in range(setup.m):
        for j in range(setup.n):
            if per_commodity_fifo and setup.movement_totals[i, j] > 0.0:
                shares = setup.directed[i, j] / setup.movement_totals[i, j]
                dev = float((flows[i, j] - shares * bounds[i, j]).max())
            else:
                dev = movement_flows[i, j] - bounds[i, j]
            if dev > worst:
                worst = dev
                detail = f"movement ({i + 1}, {j + 1}) exceeds its FIFO-reduced capacity"
    checks.append(ConstraintCheck("partial-fifo", worst <= atol, worst, detail))

    return checks


def check_first_order(
    problem: NodeProblem1,
    flows,
    tol: float = DEFAULT_TOLERANCE,
    trace: Sequence[TraceStep] | None = None,
) -> ConstraintReport:
    """Check a flow vector against the first-order node problem.

    ``trace`` may be the solver's event trace (or a ``NodeSolution``); it
    sharpens the FIFO queue-onset estimates but is optional.
    """
    if isinstance(flows, NodeSolution):
        if trace is None:
            trace = flows.trace
        flows = flows.flows
    setup = _Setup(problem)
    arr = _as_flows(setup, flows)
    atol = tol * setup.flow_scale

    exhausted = _exhausted_first_order(setup, arr, atol)
    bounds = _fifo_bounds(setup, arr, atol, trace, exhausted)
    checks = _common_families(setup, arr, atol, per_commodity_fifo=True, bounds=bounds)

    worst = 0.0
    detail = ""
    for j in range(setup.n):
        r = setup.supplies[j]
        if not math.isfinite(r):
            continue
        dev = arr[:, j, :].sum() - r
        if dev > worst:
            worst = dev
            detail = f"output {j + 1} receives more than its supply"
    supply = ConstraintCheck("supply", worst <= atol, max(worst, 0.0), detail)

    supply_base = {j: float(setup.supplies[j]) for j in exhausted}
    scir, activity = _scir_checks(
        setup, problem, arr, atol, exhausted, supply_base, bounds
    )

    ordered = checks[:2] + [supply] + checks[2:] + [scir, activity]
    return ConstraintReport(checks=tuple(ordered))


def check_second_order(
    problem: NodeProblem2,
    solution: NodeSolution2,
    tol: float = DEFAULT_TOLERANCE,
) -> ConstraintReport:
    """Check a second-order solution, replaying its trace for the supply family.

    The per-iteration supply check is authoritative; the cumulative
    fixed-point comparison is reported as advisory.
    """
    base = problem.as_first_order()
    setup = _Setup(base)
    arr = _as_flows(setup, solution.flows)
    trace = tuple(solution.trace)

    seen_supplies = [
        view.supply
        for step in trace
        for view in step.supplies
        if view is not None and math.isfinite(view.supply)
    ]
    scale = max(
        setup.flow_scale,
        max(seen_supplies, default=0.0),
        float(arr.sum()),
    )
    atol = tol * scale

    if arr.sum() > atol and not trace:
        raise ValidationError("trace required to check a second-order solution")

    worst_supply = 0.0
    supply_detail = ""

    def flag(amount: float, text: str) -> None:
        nonlocal worst_supply, supply_detail
        if amount > worst_supply:
            worst_supply = amount
            supply_detail = text

    rho = [np.asarray(s.densities, dtype=float).copy() for s in problem.downstream]
    lengths = [s.length for s in problem.downstream]
    prev_filled = frozenset(
        j
        for j in range(setup.n)
        if rho[j].sum() >= problem.diagrams[j].rho_max * (1.0 - 1e-9)
    )
    continuation: dict[int, float] = {}
    accumulated = np.zeros_like(arr)

    for step in trace:
        delta = np.asarray(step.rates) * step.dt
        for j in range(setup.n):
            inflow = float(delta[:, j, :].sum())
            if j in prev_filled:
                flag(inflow, f"output {j + 1} receives flow after closing")
                continue
            if inflow <= 0.0:
                continue
            view = step.supplies[j]
            if view is None:
                flag(inflow, f"output {j + 1} has inflow but no recorded supply")
                continue
            if view.fresh:
                state = LinkState(
                    densities=tuple(float(r) for r in rho[j]),
                    length=lengths[j],
                    commodities=problem.commodities,
                )
                mid = upstream_middle_state(
                    np.asarray(step.rates)[:, j, :],
                    state,
                    problem.commodities,
                    problem.diagrams[j],
                )
                expected = recompute_supply(mid, problem.diagrams[j]) * problem.time_scale
                flag(
                    abs(view.supply - expected),
                    f"output {j + 1}: recorded supply disagrees with its middle state",
                )
                flag(
                    abs(view.w_upstream - mid.w),
                    f"output {j + 1}: recorded upstream property disagrees with the rates",
                )
            else:
                if j not in continuation:
                    flag(view.supply, f"output {j + 1}: continued supply without origin")
                else:
                    flag(
                        abs(view.supply - continuation[j]),
                        f"output {j + 1}: continued supply does not match the budget",
                    )
            flag(inflow - view.supply, f"output {j + 1} receives more than its supply")
            continuation[j] = max(view.supply - inflow, 0.0)
        for j in range(setup.n):
            rho[j] += delta[:, j, :].sum(axis=0) / lengths[j]
            over = rho[j].sum() - problem.diagrams[j].rho_max
            flag(over, f"output {j + 1} exceeds jam density")
        accumulated += delta
        for j in step.filled - prev_filled:
            leftover = continuation.get(j, 0.0)
            jam_gap = problem.diagrams[j].rho_max - float(rho[j].sum())
            if leftover > atol and jam_gap * lengths[j] > atol:
                flag(
                    min(leftover, jam_gap * lengths[j]),
                    f"output {j + 1} closed with supply and space remaining",
                )
        prev_filled = step.filled

    mismatch = float(np.abs(arr - accumulated).max()) if trace else float(np.abs(arr).max())
    flag(mismatch, "final flows do not match the trace")
    for j in range(setup.n):
        dev = float(np.abs(rho[j] - np.asarray(solution.final_densities[j])).max())
        flag(dev * lengths[j], f"final densities of output {j + 1} do not match the trace")

    supply = ConstraintCheck(
        "supply", worst_supply <= atol, max(worst_supply, 0.0), supply_detail
    )

    bounds = _fifo_bounds(setup, arr, atol, trace, set())
    checks = _common_families(setup, arr, atol, per_commodity_fifo=False, bounds=bounds)

    filled_final = trace[-1].filled if trace else prev_filled
    delivered = {j: float(arr[:, j, :].sum()) for j in filled_final}
    scir, activity = _scir_checks(
        setup, base, arr, atol, set(filled_final), delivered, bounds
    )

    worst = 0.0
    detail = ""
    for j in range(setup.n):
        total = float(arr[:, j, :].sum())
        if total <= atol:
            continue
        mid = upstream_middle_state(
            arr[:, j, :], problem.downstream[j], problem.commodities, problem.diagrams[j]
        )
        r_cum = recompute_supply(mid, problem.diagrams[j]) * problem.time_scale
        dev = total - r_cum
        if dev > worst:
            worst = dev
            detail = f"output {j + 1} exceeds the supply of its cumulative mixture"
    cumulative = ConstraintCheck(
        "supply-cumulative",
        worst <= atol,
        max(worst, 0.0),
        detail,
        advisory=True,
    )

    ordered = checks[:2] + [supply] + checks[2:] + [scir, activity, cumulative]
    return ConstraintReport(checks=tuple(ordered))
