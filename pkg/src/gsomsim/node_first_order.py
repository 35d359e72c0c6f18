"""Event-driven solver for the first-order junction flow problem.

Movement flows grow at oriented-priority rates, split across commodities in
proportion to their remaining demands.  A queue forms whenever an output
fills; it blocks its own movement entirely and other movements of the same
input over their restriction intervals.  Because the rates are piecewise
constant, the next constraint activation (an output filling, a movement
exhausting its demand, or an input's capacity time limit expiring) is found
in closed form and the execution jumps from event to event.

Inputs whose capacity is not given default to their total demand, which makes
the capacity time limit equal the demand-exhaustion horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericalError, ValidationError
from .intervals import RestrictionMap, union_measure

__all__ = [
    "NodeProblem1",
    "NodeSolution",
    "Event",
    "TraceStep",
    "flow_rates",
    "next_event_time",
    "solve",
    "restricting_sets",
    "EPS_TIME",
    "MAX_ITERATIONS",
]

# Events within this window of the earliest candidate fire in the same
# iteration, avoiding zero-length iterations and order dependence.
EPS_TIME = 1e-12

# Hard guard; the event structure bounds iterations by M*N + M + N.
MAX_ITERATIONS = 10_000


def _nested_tuple(values, depth: int):
    if depth == 1:
        return tuple(float(v) for v in values)
    return tuple(_nested_tuple(v, depth - 1) for v in values)


@dataclass(frozen=True)
class NodeProblem1:
    """First-order node problem data.

    demands[i][c]     per-commodity demand of input i (veh/step)
    splits[i][j][c]   fraction of input i's commodity c headed for output j
    supplies[j]       space output j can accept (veh/step); may be ``inf``
    priorities[i]     rate at which input i claims downstream space (> 0)
    restrictions      partial-FIFO restriction intervals
    capacities[i]     optional input capacity (veh/step); defaults to the
                      input's total demand
    """

    demands: tuple[tuple[float, ...], ...]
    splits: tuple[tuple[tuple[float, ...], ...], ...]
    supplies: tuple[float, ...]
    priorities: tuple[float, ...]
    restrictions: RestrictionMap = field(default_factory=RestrictionMap)
    capacities: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "demands", _nested_tuple(self.demands, 2))
        object.__setattr__(self, "splits", _nested_tuple(self.splits, 3))
        object.__setattr__(self, "supplies", tuple(float(r) for r in self.supplies))
        object.__setattr__(self, "priorities", tuple(float(p) for p in self.priorities))
        if self.capacities is not None:
            object.__setattr__(
                self, "capacities", tuple(float(f) for f in self.capacities)
            )
        self._validate()

    def _validate(self) -> None:
        m, n, c = self.num_inputs, self.num_outputs, self.num_commodities
        if m < 1 or n < 1 or c < 1:
            raise ValidationError("node problem needs at least one input, output, and commodity")
        if any(len(row) != c for row in self.demands):
            raise ValidationError("ragged demand table")
        if len(self.splits) != m or any(len(row) != n for row in self.splits):
            raise ValidationError("split table must be inputs x outputs x commodities")
        for i, row in enumerate(self.splits):
            for j, cell in enumerate(row):
                if len(cell) != c:
                    raise ValidationError(f"split entry ({i}, {j}) has wrong commodity count")
                for beta in cell:
                    if not 0.0 <= beta <= 1.0 + 1e-12:
                        raise ValidationError(
                            f"split ratio out of [0, 1] at input {i}, output {j}"
                        )
        for i in range(m):
            for k in range(c):
                if self.demands[i][k] < 0.0 or not math.isfinite(self.demands[i][k]):
                    raise ValidationError(f"demand must be nonnegative at input {i}")
                if self.demands[i][k] > 0.0:
                    total = sum(self.splits[i][j][k] for j in range(n))
                    if abs(total - 1.0) > 1e-9:
                        raise ValidationError(
                            f"split ratios for input {i}, commodity {k} sum to {total}, not 1"
                        )
        for j, r in enumerate(self.supplies):
            if math.isnan(r) or r < 0.0:
                raise ValidationError(f"supply of output {j} must be nonnegative")
        for i, p in enumerate(self.priorities):
            if not math.isfinite(p) or p <= 0.0:
                raise ValidationError(f"priority of input {i} must be strictly positive")
        if len(self.priorities) != m:
            raise ValidationError("one priority per input is required")
        if self.capacities is not None:
            if len(self.capacities) != m:
                raise ValidationError("one capacity per input is required")
            for i, cap in enumerate(self.capacities):
                total = sum(self.demands[i])
                if not math.isfinite(cap) or cap <= 0.0:
                    raise ValidationError(f"capacity of input {i} must be positive")
                if cap < total * (1.0 - 1e-9):
                    raise ValidationError(
                        f"capacity of input {i} ({cap}) is below its total demand ({total})"
                    )
        for (i, blocker, blocked) in self.restrictions.entries:
            if i >= m or blocker >= n or blocked >= n:
                raise ValidationError(
                    f"restriction ({i}, {blocker}, {blocked}) references a missing link"
                )

    @property
    def num_inputs(self) -> int:
        return len(self.demands)

    @property
    def num_outputs(self) -> int:
        return len(self.supplies)

    @property
    def num_commodities(self) -> int:
        return len(self.demands[0])


class _Setup:
    """Precomputed arrays shared by the rate, event, and solve routines."""

    def __init__(self, problem: NodeProblem1):
        self.problem = problem
        self.m = problem.num_inputs
        self.n = problem.num_outputs
        self.c = problem.num_commodities
        demand = np.asarray(problem.demands, dtype=float)           # (M, C)
        beta = np.asarray(problem.splits, dtype=float)              # (M, N, C)
        self.directed = beta * demand[:, None, :]                   # (M, N, C)
        self.movement_totals = self.directed.sum(axis=2)            # (M, N)
        self.input_totals = demand.sum(axis=1)                      # (M,)
        priorities = np.asarray(problem.priorities, dtype=float)
        with np.errstate(invalid="ignore", divide="ignore"):
            share = np.where(
                self.input_totals[:, None] > 0.0,
                self.movement_totals / np.maximum(self.input_totals[:, None], 1e-300),
                0.0,
            )
        self.oriented_priorities = priorities[:, None] * share      # (M, N)
        if problem.capacities is not None:
            self.capacities = np.asarray(problem.capacities, dtype=float)
        else:
            self.capacities = self.input_totals.copy()
        self.movement_capacities = self.capacities[:, None] * share  # (M, N)
        self.time_limits = np.where(
            self.input_totals > 0.0, self.capacities / priorities, 0.0
        )
        self.supplies = np.asarray(problem.supplies, dtype=float)
        self.eta = problem.restrictions
        finite_r = self.supplies[np.isfinite(self.supplies)]
        self.flow_scale = max(
            1.0,
            float(self.input_totals.max(initial=0.0)),
            float(finite_r.max(initial=0.0)),
        )
        self.eps_flow = 1e-12 * self.flow_scale


def _queued_blockers(setup: _Setup, flows: np.ndarray, i: int, filled: frozenset[int]):
    """Filled outputs this input still has unserved demand for."""
    return [
        jp
        for jp in filled
        if setup.movement_totals[i, jp] > 0.0
        and flows[i, jp].sum() < setup.movement_totals[i, jp] - setup.eps_flow
    ]


def _flow_rates(
    setup: _Setup,
    flows: np.ndarray,
    filled: frozenset[int],
    finished: frozenset[int],
) -> np.ndarray:
    rates = np.zeros((setup.m, setup.n, setup.c))
    for i in range(setup.m):
        if i in finished:
            continue
        blockers = _queued_blockers(setup, flows, i, filled)
        for j in range(setup.n):
            if j in filled:
                # The queue for j stands on exactly the lanes serving (i, j):
                # an implicit full self restriction.
                continue
            remaining = np.maximum(setup.directed[i, j] - flows[i, j], 0.0)
            total_remaining = remaining.sum()
            if total_remaining <= setup.eps_flow:
                continue
            factor = 1.0 - union_measure(setup.eta.intervals_onto(i, j, blockers))
            if factor <= 0.0:
                continue
            rates[i, j] = (
                setup.oriented_priorities[i, j] * factor * remaining / total_remaining
            )
    return rates


def flow_rates(
    problem: NodeProblem1,
    flows,
    filled: Iterable[int],
    finished: Iterable[int],
) -> np.ndarray:
    """Instantaneous movement flow rates in the current discrete mode."""
    setup = _Setup(problem)
    return _flow_rates(
        setup, np.asarray(flows, dtype=float), frozenset(filled), frozenset(finished)
    )


@dataclass(frozen=True)
class Event:
    """A state change: an output fills or jams, a movement's demand runs out,
    or an input's capacity time limit expires."""

    kind: str  # "supply" | "jam" | "demand" | "time"
    index: tuple[int, ...]
    time: float

    def label(self) -> str:
        ids = ",".join(str(k + 1) for k in self.index)
        return f"{self.kind}({ids})"


def _event_candidates(
    setup: _Setup,
    flows: np.ndarray,
    rates: np.ndarray,
    filled: frozenset[int],
    finished: frozenset[int],
    t0: float,
) -> list[tuple[float, str, tuple[int, ...]]]:
    candidates: list[tuple[float, str, tuple[int, ...]]] = []
    inflow = rates.sum(axis=(0, 2))
    for j in range(setup.n):
        if j in filled or inflow[j] <= 0.0 or not math.isfinite(setup.supplies[j]):
            continue
        remaining = setup.supplies[j] - flows[:, j, :].sum()
        candidates.append((max(remaining, 0.0) / inflow[j], "supply", (j,)))
    movement_rates = rates.sum(axis=2)
    for i in range(setup.m):
        for j in range(setup.n):
            if movement_rates[i, j] <= 0.0:
                continue
            remaining = setup.movement_totals[i, j] - flows[i, j].sum()
            candidates.append(
                (max(remaining, 0.0) / movement_rates[i, j], "demand", (i, j))
            )
    for i in range(setup.m):
        if i in finished:
            continue
        candidates.append((max(setup.time_limits[i] - t0, 0.0), "time", (i,)))
    return candidates


def next_event_time(
    problem: NodeProblem1,
    flows,
    rates,
    filled: Iterable[int],
    finished: Iterable[int],
    t0: float,
) -> tuple[float, tuple[Event, ...]] | None:
    """Time step to the next mode switch and the events that fire there.

    Returns ``None`` when every rate is zero (the execution is terminal).
    Simultaneous events (within ``EPS_TIME`` of the minimum) fire together.
    """
    setup = _Setup(problem)
    flows = np.asarray(flows, dtype=float)
    rates = np.asarray(rates, dtype=float)
    if not (rates > 0.0).any():
        return None
    candidates = _event_candidates(
        setup, flows, rates, frozenset(filled), frozenset(finished), t0
    )
    if not candidates:
        return None
    dt_min = min(dt for dt, _, _ in candidates)
    window = EPS_TIME * max(1.0, abs(t0) + dt_min)
    events = tuple(
        Event(kind=kind, index=index, time=t0 + dt_min)
        for dt, kind, index in sorted(candidates, key=lambda item: (item[1], item[2]))
        if dt <= dt_min + window
    )
    return dt_min, events


def restricting_sets(
    problem: NodeProblem1, flows, rel_tol: float = 1e-9
) -> tuple[frozenset[int], ...]:
    """Outputs restricting each input: demanded outputs where no other input
    achieves a strictly larger priority-normalized flow."""
    setup = _Setup(problem)
    return _restricting_sets(setup, np.asarray(flows, dtype=float), rel_tol)


def _restricting_sets(
    setup: _Setup, flows: np.ndarray, rel_tol: float = 1e-9
) -> tuple[frozenset[int], ...]:
    movement_flows = flows.sum(axis=2)
    p = setup.oriented_priorities
    sets = []
    for i in range(setup.m):
        members = set()
        for j in range(setup.n):
            if setup.movement_totals[i, j] <= 0.0:
                continue
            ratio = movement_flows[i, j] / p[i, j]
            beaten = False
            for other in range(setup.m):
                if other == i or p[other, j] <= 0.0:
                    continue
                other_ratio = movement_flows[other, j] / p[other, j]
                if ratio < other_ratio - rel_tol * max(1.0, other_ratio):
                    beaten = True
                    break
            if not beaten:
                members.add(j)
        sets.append(frozenset(members))
    return tuple(sets)


@dataclass(frozen=True)
class TraceStep:
    """One solver iteration: the mode, its rates, and the events ending it."""

    k: int
    t: float
    dt: float
    rates: np.ndarray
    filled: frozenset[int]
    finished: frozenset[int]
    events: tuple[Event, ...]
    restricting: tuple[frozenset[int], ...]


@dataclass(frozen=True)
class NodeSolution:
    """Flows and event trace returned by the first-order solver."""

    flows: np.ndarray
    trace: tuple[TraceStep, ...]
    final_time: float
    problem: NodeProblem1

    @property
    def iterations(self) -> int:
        return len(self.trace)

    def fill_times(self) -> dict[int, float]:
        """Time each output entered the filled set, from the event trace."""
        times: dict[int, float] = {}
        for step in self.trace:
            for event in step.events:
                if event.kind in ("supply", "jam") and event.index[0] not in times:
                    times[event.index[0]] = event.time
        return times

    def movement_flows(self) -> np.ndarray:
        return self.flows.sum(axis=2)


def solve(problem: NodeProblem1) -> NodeSolution:
    """Run the event-driven execution until every flow rate is zero."""
    setup = _Setup(problem)
    m, n, c = setup.m, setup.n, setup.c
    flows = np.zeros((m, n, c))
    t = 0.0
    filled = frozenset(
        j for j in range(n) if setup.supplies[j] <= setup.eps_flow
    )
    finished = frozenset(i for i in range(m) if setup.input_totals[i] <= 0.0)
    trace: list[TraceStep] = []

    for k in range(MAX_ITERATIONS):
        rates = _flow_rates(setup, flows, filled, finished)
        # An input none of whose movements can flow again is finished: the
        # blocked set only grows, so its rates stay zero.
        stalled = frozenset(
            i
            for i in range(m)
            if i not in finished and not (rates[i] > 0.0).any()
        )
        finished |= stalled
        if not (rates > 0.0).any():
            break
        step = next_event_time(problem, flows, rates, filled, finished, t)
        if step is None:  # pragma: no cover - guarded by the rates check above
            break
        dt, events = step
        flows += rates * dt
        t += dt
        for event in events:
            if event.kind == "supply":
                filled |= {event.index[0]}
            elif event.kind == "time":
                finished |= {event.index[0]}
            elif event.kind == "demand":
                i, j = event.index
                flows[i, j, :] = setup.directed[i, j]  # land exactly on the bound
        trace.append(
            TraceStep(
                k=k,
                t=t - dt,
                dt=dt,
                rates=_readonly(rates),
                filled=filled,
                finished=finished,
                events=events,
                restricting=_restricting_sets(setup, flows),
            )
        )
    else:
        raise NumericalError("node execution did not terminate within the iteration guard")

    return NodeSolution(
        flows=_readonly(flows), trace=tuple(trace), final_time=t, problem=problem
    )


def _readonly(array: np.ndarray) -> np.ndarray:
    out = array.copy()
    out.setflags(write=False)
    return out


def directed_demands(problem: NodeProblem1) -> np.ndarray:
    """Per-movement per-commodity demands (M, N, C)."""
    return _Setup(problem).directed.copy()


def oriented_priorities(problem: NodeProblem1) -> np.ndarray:
    """Input priorities distributed across movements by demand share (M, N)."""
    return _Setup(problem).oriented_priorities.copy()


def movement_capacities(problem: NodeProblem1) -> np.ndarray:
    """Input capacities distributed across movements by demand share (M, N)."""
    return _Setup(problem).movement_capacities.copy()


def time_limits(problem: NodeProblem1) -> np.ndarray:
    """Capacity time limits per input."""
    return _Setup(problem).time_limits.copy()
