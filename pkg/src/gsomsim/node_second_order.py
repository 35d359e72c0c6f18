"""Event-driven solver for the second-order junction flow problem.

The structure mirrors the first-order execution, but no output supply is
known up front: the space a downstream link offers depends on the property
mix of the traffic actually entering it.  Each output therefore carries a
supply budget computed from its upstream middle state.  The budget drains as
vehicles flow in and is recomputed from the current downstream densities
whenever the incoming property mix changes (an input finishing or another
event reshaping the rates).  Consuming the budget closes the output, exactly
as filling a fixed supply does in the first-order system; an output also
closes if its downstream link reaches jam density.

Downstream speeds and net properties are refreshed only at events; between
events the dynamics are constant, which is what makes the closed-form event
times valid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NoInflowError, NumericalError, ValidationError
from .fd import (
    CommoditySet,
    FundamentalDiagram,
    LinkState,
    MiddleState,
    supply_from_middle,
)
from .intervals import RestrictionMap
from .node_first_order import (
    EPS_TIME,
    MAX_ITERATIONS,
    Event,
    NodeProblem1,
    _flow_rates,
    _nested_tuple,
    _readonly,
    _restricting_sets,
    _Setup,
)

__all__ = [
    "NodeProblem2",
    "NodeSolution2",
    "SupplyState",
    "TraceStep2",
    "upstream_middle_state",
    "recompute_supply",
    "solve",
    "EPS_JAM",
]

# An output counts as jammed when its density is within this relative margin
# of the jam density; with strictly decreasing velocity that is v = 0.
EPS_JAM = 1e-9


@dataclass(frozen=True)
class NodeProblem2:
    """Second-order node problem data.

    Demands are held fixed (they are precomputed from upstream states by the
    caller); supplies are not part of the problem and emerge during the
    solve.  ``time_scale`` converts the diagrams' flow rates into the
    problem's vehicle units (a network simulator passes its timestep here).
    """

    demands: tuple[tuple[float, ...], ...]
    splits: tuple[tuple[tuple[float, ...], ...], ...]
    priorities: tuple[float, ...]
    commodities: CommoditySet
    downstream: tuple[LinkState, ...]
    diagrams: tuple[FundamentalDiagram, ...]
    restrictions: RestrictionMap = field(default_factory=RestrictionMap)
    capacities: tuple[float, ...] | None = None
    time_scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "demands", _nested_tuple(self.demands, 2))
        object.__setattr__(self, "splits", _nested_tuple(self.splits, 3))
        object.__setattr__(self, "priorities", tuple(float(p) for p in self.priorities))
        if self.capacities is not None:
            object.__setattr__(
                self, "capacities", tuple(float(f) for f in self.capacities)
            )
        object.__setattr__(self, "downstream", tuple(self.downstream))
        diagrams = self.diagrams
        if isinstance(diagrams, FundamentalDiagram):
            diagrams = (diagrams,) * len(self.downstream)
        object.__setattr__(self, "diagrams", tuple(diagrams))
        base = self.as_first_order()  # validates the shared structure
        if len(self.downstream) != base.num_outputs:
            raise ValidationError("one downstream state per output is required")
        if len(self.diagrams) != base.num_outputs:
            raise ValidationError("one diagram per output is required")
        for j, (state, diagram) in enumerate(zip(self.downstream, self.diagrams)):
            if state.commodities != self.commodities:
                raise ValidationError(
                    f"downstream state {j} uses a different commodity set"
                )
            if state.total_density > diagram.rho_max * (1.0 + 1e-12):
                raise ValidationError(
                    f"downstream state {j} exceeds jam density {diagram.rho_max}"
                )
        if self.commodities.count != base.num_commodities:
            raise ValidationError("commodity set size does not match the demand table")
        if not math.isfinite(self.time_scale) or self.time_scale <= 0.0:
            raise ValidationError(f"time scale must be positive, got {self.time_scale}")

    def as_first_order(
        self, supplies: Sequence[float] | None = None
    ) -> NodeProblem1:
        """The same node with fixed supplies (infinite by default)."""
        n = len(self.splits[0]) if self.splits else len(self.downstream)
        if supplies is None:
            supplies = (math.inf,) * n
        return NodeProblem1(
            demands=self.demands,
            splits=self.splits,
            supplies=tuple(supplies),
            priorities=self.priorities,
            restrictions=self.restrictions,
            capacities=self.capacities,
        )

    @property
    def num_inputs(self) -> int:
        return len(self.demands)

    @property
    def num_outputs(self) -> int:
        return len(self.downstream)

    @property
    def num_commodities(self) -> int:
        return self.commodities.count


@dataclass(frozen=True)
class SupplyState:
    """Middle state and remaining supply of one output during one iteration.

    ``fresh`` marks iterations where the supply was recomputed from the
    downstream densities because the incoming property mix changed; otherwise
    ``supply`` is the previous budget less what has flowed in since.
    """

    w_upstream: float
    v_upstream: float
    rho_upstream: float
    supply: float
    fresh: bool


@dataclass(frozen=True)
class TraceStep2:
    """One second-order iteration, including per-output supply states."""

    k: int
    t: float
    dt: float
    rates: np.ndarray
    filled: frozenset[int]
    finished: frozenset[int]
    events: tuple[Event, ...]
    supplies: tuple[SupplyState | None, ...]
    restricting: tuple[frozenset[int], ...]


@dataclass(frozen=True)
class NodeSolution2:
    """Flows, final downstream densities, and the event trace."""

    flows: np.ndarray
    trace: tuple[TraceStep2, ...]
    final_time: float
    final_densities: tuple[tuple[float, ...], ...]
    final_net_properties: tuple[float | None, ...]
    problem: NodeProblem2

    @property
    def iterations(self) -> int:
        return len(self.trace)

    def fill_times(self) -> dict[int, float]:
        times: dict[int, float] = {}
        for step in self.trace:
            for event in step.events:
                if event.kind in ("supply", "jam") and event.index[0] not in times:
                    times[event.index[0]] = event.time
        return times

    def movement_flows(self) -> np.ndarray:
        return self.flows.sum(axis=2)


def upstream_middle_state(
    rates,
    downstream: LinkState,
    commodities: CommoditySet,
    diagram: FundamentalDiagram,
) -> MiddleState:
    """Middle state just upstream of an output link.

    ``rates`` is any array whose last axis is the commodity axis; it is
    aggregated to per-commodity inflow rates.  Raises ``NoInflowError`` when
    the total rate is not positive.  An empty downstream link imposes no
    speed limit (its undefined net property is replaced by the incoming mix).
    """
    per_commodity = np.asarray(rates, dtype=float).reshape(-1, commodities.count)
    per_commodity = per_commodity.sum(axis=0)
    total = float(per_commodity.sum())
    if total <= 0.0:
        raise NoInflowError("no inflow: the upstream middle state is undefined")
    w_up = commodities.mix(per_commodity)
    if downstream.is_empty:
        v_down = diagram.velocity(0.0, w_up)
    else:
        rho_down = min(downstream.total_density, diagram.rho_max)
        v_down = diagram.velocity(rho_down, downstream.net_property())
    v_up = min(diagram.velocity(0.0, w_up), v_down)
    rho_up = diagram.invert_density(v_up, w_up)
    return MiddleState(w=w_up, v=v_up, rho=rho_up)


def recompute_supply(mid: MiddleState, diagram: FundamentalDiagram) -> float:
    """Supply available to the incoming mixture, from its middle state."""
    return supply_from_middle(mid, diagram)


def _jammed(rho_total: float, diagram: FundamentalDiagram) -> bool:
    return rho_total >= diagram.rho_max * (1.0 - EPS_JAM)


def solve(problem: NodeProblem2) -> NodeSolution2:
    """Run the second-order event-driven execution until all rates are zero."""
    setup = _Setup(problem.as_first_order())
    m, n, c = setup.m, setup.n, setup.c
    commodities = problem.commodities
    diagrams = problem.diagrams
    lengths = [state.length for state in problem.downstream]
    rho = [np.asarray(state.densities, dtype=float).copy() for state in problem.downstream]

    flows = np.zeros((m, n, c))
    t = 0.0
    filled = frozenset(
        j for j in range(n) if _jammed(float(rho[j].sum()), diagrams[j])
    )
    finished = frozenset(i for i in range(m) if setup.input_totals[i] <= 0.0)

    budgets: list[float | None] = [None] * n
    mix_w: list[float | None] = [None] * n
    middle: list[MiddleState | None] = [None] * n
    trace: list[TraceStep2] = []

    for k in range(MAX_ITERATIONS):
        rates = _flow_rates(setup, flows, filled, finished)
        stalled = frozenset(
            i for i in range(m) if i not in finished and not (rates[i] > 0.0).any()
        )
        finished |= stalled
        if not (rates > 0.0).any():
            break

        # Refresh each inflowing output's supply when its incoming mix changed.
        views: list[SupplyState | None] = [None] * n
        inflow_rates = rates.sum(axis=(0, 2))
        for j in range(n):
            if j in filled or inflow_rates[j] <= 0.0:
                continue
            per_commodity = rates[:, j, :].sum(axis=0)
            w_new = commodities.mix(per_commodity)
            previous = mix_w[j]
            changed = (
                budgets[j] is None
                or previous is None
                or abs(w_new - previous) > 1e-12 * max(1.0, abs(w_new), abs(previous))
            )
            if changed:
                state = LinkState(
                    densities=tuple(rho[j]),
                    length=lengths[j],
                    commodities=commodities,
                )
                mid = upstream_middle_state(per_commodity, state, commodities, diagrams[j])
                budgets[j] = recompute_supply(mid, diagrams[j]) * problem.time_scale
                mix_w[j] = w_new
                middle[j] = mid
            mid = middle[j]
            views[j] = SupplyState(
                w_upstream=mid.w,
                v_upstream=mid.v,
                rho_upstream=mid.rho,
                supply=budgets[j],
                fresh=changed,
            )

        # Closed-form event candidates under the constant rates.
        candidates: list[tuple[float, str, tuple[int, ...]]] = []
        for j in range(n):
            if j in filled or inflow_rates[j] <= 0.0:
                continue
            candidates.append((max(budgets[j], 0.0) / inflow_rates[j], "supply", (j,)))
            headroom = (diagrams[j].rho_max - float(rho[j].sum())) * lengths[j]
            candidates.append((max(headroom, 0.0) / inflow_rates[j], "jam", (j,)))
        movement_rates = rates.sum(axis=2)
        for i in range(m):
            for j in range(n):
                if movement_rates[i, j] <= 0.0:
                    continue
                remaining = setup.movement_totals[i, j] - flows[i, j].sum()
                candidates.append(
                    (max(remaining, 0.0) / movement_rates[i, j], "demand", (i, j))
                )
        for i in range(m):
            if i not in finished:
                candidates.append((max(setup.time_limits[i] - t, 0.0), "time", (i,)))

        dt = min(c0 for c0, _, _ in candidates)
        window = EPS_TIME * max(1.0, abs(t) + dt)
        events = tuple(
            Event(kind=kind, index=index, time=t + dt)
            for cand_dt, kind, index in sorted(
                candidates, key=lambda item: (item[1], item[2])
            )
            if cand_dt <= dt + window
        )

        delta = rates * dt
        flows += delta
        t += dt
        for j in range(n):
            inflow_c = delta[:, j, :].sum(axis=0)
            total_in = float(inflow_c.sum())
            if total_in > 0.0:
                rho[j] += inflow_c / lengths[j]
                if budgets[j] is not None:
                    budgets[j] = max(budgets[j] - total_in, 0.0)

        for event in events:
            if event.kind in ("supply", "jam"):
                j = event.index[0]
                filled |= {j}
                if event.kind == "supply":
                    budgets[j] = 0.0
            elif event.kind == "time":
                finished |= {event.index[0]}
            elif event.kind == "demand":
                i, j = event.index
                correction = setup.directed[i, j] - flows[i, j]
                flows[i, j, :] = setup.directed[i, j]
                rho[j] += correction / lengths[j]  # keep flows and densities in lockstep
        # Guard against a jam reached in lockstep with another event.
        extra = []
        for j in range(n):
            if j not in filled and _jammed(float(rho[j].sum()), diagrams[j]):
                filled |= {j}
                extra.append(Event(kind="jam", index=(j,), time=t))
        if extra:
            events = events + tuple(extra)

        trace.append(
            TraceStep2(
                k=k,
                t=t - dt,
                dt=dt,
                rates=_readonly(rates),
                filled=filled,
                finished=finished,
                events=events,
                supplies=tuple(views),
                restricting=_restricting_sets(setup, flows),
            )
        )
    else:
        raise NumericalError("node execution did not terminate within the iteration guard")

    final_densities = tuple(tuple(float(r) for r in rho[j]) for j in range(n))
    final_w = tuple(
        commodities.mix(rho[j]) if float(rho[j].sum()) > 0.0 else None for j in range(n)
    )
    return NodeSolution2(
        flows=_readonly(flows),
        trace=tuple(trace),
        final_time=t,
        final_densities=final_densities,
        final_net_properties=final_w,
        problem=problem,
    )
