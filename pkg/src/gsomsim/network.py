"""Godunov finite-volume simulator for road networks.

Links are split into uniform cells.  Every internal cell boundary is a
1-to-1 second-order flux (demand against property-aware supply); junctions
pose one node problem per step, in vehicles-per-step units, and apply the
resulting movement flows to the adjacent cells.  All boundary and junction
fluxes read the pre-step state, so their evaluation order does not matter;
the explicit density update follows.

Units: link lengths and densities are physical (distance, veh/distance);
capacities, priorities, and boundary profiles are rates (veh/time).  Node
problems receive them multiplied by the timestep.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import CFLError, NumericalError, ValidationError
from .fd import CommoditySet, FundamentalDiagram, LinkState, supply_1to1
from .intervals import RestrictionInterval, RestrictionMap
from .node_first_order import NodeProblem1
from .node_first_order import solve as solve_first_order
from .node_second_order import NodeProblem2
from .node_second_order import solve as solve_second_order

__all__ = [
    "PiecewiseConstant",
    "Link",
    "Network",
    "Scenario",
    "SimState",
    "SimOutput",
    "cfl_bound",
    "step",
    "run",
]


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous step function given by (time, value) breakpoints."""

    times: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        times = tuple(float(t) for t in self.times)
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if not times or len(times) != len(values):
            raise ValidationError("profile needs matching, nonempty times and values")
        if times[0] != 0.0:
            raise ValidationError("profile must start at time 0")
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValidationError("profile times must be strictly increasing")
        for v in values:
            if math.isnan(v) or v < 0.0:
                raise ValidationError("profile values must be nonnegative")

    @classmethod
    def constant(cls, value: float) -> "PiecewiseConstant":
        return cls(times=(0.0,), values=(float(value),))

    def value_at(self, t: float) -> float:
        idx = bisect.bisect_right(self.times, t) - 1
        return self.values[max(idx, 0)]


@dataclass(frozen=True)
class Link:
    """A directed road segment discretized into uniform cells."""

    name: str
    upstream: str
    downstream: str
    length: float
    cells: int
    diagram: FundamentalDiagram
    capacity: float
    priority: float | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("link name must be nonempty")
        if not math.isfinite(self.length) or self.length <= 0.0:
            raise ValidationError(f"link {self.name}: length must be positive")
        if self.cells < 1 or self.cells != int(self.cells):
            raise ValidationError(f"link {self.name}: cell count must be a positive integer")
        if not math.isfinite(self.capacity) or self.capacity <= 0.0:
            raise ValidationError(f"link {self.name}: capacity must be positive")
        if self.priority is None:
            object.__setattr__(self, "priority", float(self.capacity))
        elif not math.isfinite(self.priority) or self.priority <= 0.0:
            raise ValidationError(f"link {self.name}: priority must be positive")

    @property
    def cell_length(self) -> float:
        return self.length / self.cells


@dataclass(frozen=True)
class Network:
    """Topology, physics, and junction configuration of a road network.

    ``splits[(node, in_link, out_link, commodity)]`` are piecewise-constant
    split-ratio profiles; a junction with a single output may omit them.
    ``restriction_entries`` hold partial-FIFO intervals per junction as
    (node, in_link, blocker_out_link, blocked_out_link, interval).
    Sources are nodes with no incoming link (one outgoing link, demand
    profiles in veh/time per commodity); sinks have no outgoing link (one
    incoming link, optional supply profile, unlimited by default).
    """

    commodities: CommoditySet
    commodity_names: tuple[str, ...]
    links: tuple[Link, ...]
    splits: Mapping[tuple[str, str, str, str], PiecewiseConstant] = field(
        default_factory=dict
    )
    restriction_entries: tuple[
        tuple[str, str, str, str, RestrictionInterval], ...
    ] = ()
    demand_profiles: Mapping[tuple[str, str], PiecewiseConstant] = field(
        default_factory=dict
    )
    supply_profiles: Mapping[str, PiecewiseConstant] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "splits", dict(self.splits))
        object.__setattr__(self, "restriction_entries", tuple(self.restriction_entries))
        object.__setattr__(self, "demand_profiles", dict(self.demand_profiles))
        object.__setattr__(self, "supply_profiles", dict(self.supply_profiles))
        self.validate()

    # -- topology helpers ---------------------------------------------------

    def link(self, name: str) -> Link:
        for ln in self.links:
            if ln.name == name:
                return ln
        raise ValidationError(f"unknown link {name!r}")

    def node_names(self) -> list[str]:
        names = {ln.upstream for ln in self.links} | {ln.downstream for ln in self.links}
        return sorted(names)

    def inputs_of(self, node: str) -> list[Link]:
        return sorted(
            (ln for ln in self.links if ln.downstream == node), key=lambda l: l.name
        )

    def outputs_of(self, node: str) -> list[Link]:
        return sorted(
            (ln for ln in self.links if ln.upstream == node), key=lambda l: l.name
        )

    def junctions(self) -> list[str]:
        return [
            n for n in self.node_names() if self.inputs_of(n) and self.outputs_of(n)
        ]

    def sources(self) -> list[str]:
        return [
            n for n in self.node_names() if not self.inputs_of(n) and self.outputs_of(n)
        ]

    def sinks(self) -> list[str]:
        return [
            n for n in self.node_names() if self.inputs_of(n) and not self.outputs_of(n)
        ]

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        if len(self.commodity_names) != self.commodities.count:
            raise ValidationError("one name per commodity is required")
        if len(set(self.commodity_names)) != len(self.commodity_names):
            raise ValidationError("commodity names must be unique")
        names = [ln.name for ln in self.links]
        if len(set(names)) != len(names):
            raise ValidationError("link names must be unique")
        if not self.links:
            raise ValidationError("network needs at least one link")
        for node in self.sources():
            if len(self.outputs_of(node)) != 1:
                raise ValidationError(f"source node {node!r} must feed exactly one link")
        for node in self.sinks():
            if len(self.inputs_of(node)) != 1:
                raise ValidationError(f"sink node {node!r} must drain exactly one link")

        junctions = set(self.junctions())
        for (node, in_name, out_name, cname), profile in self.splits.items():
            if node not in junctions:
                raise ValidationError(f"split at {node!r}: not a junction")
            if in_name not in [l.name for l in self.inputs_of(node)]:
                raise ValidationError(f"split at {node!r}: {in_name!r} is not an input")
            if out_name not in [l.name for l in self.outputs_of(node)]:
                raise ValidationError(f"split at {node!r}: {out_name!r} is not an output")
            if cname not in self.commodity_names:
                raise ValidationError(f"split at {node!r}: unknown commodity {cname!r}")
            for v in profile.values:
                if v > 1.0 + 1e-12:
                    raise ValidationError(
                        f"split at {node!r}, {in_name!r}->{out_name!r}: ratio above 1"
                    )
        for node in junctions:
            outs = [l.name for l in self.outputs_of(node)]
            for in_link in self.inputs_of(node):
                for cname in self.commodity_names:
                    profiles = [
                        self.splits.get((node, in_link.name, out, cname)) for out in outs
                    ]
                    if all(p is None for p in profiles):
                        if len(outs) == 1:
                            continue  # implicit everything-to-the-single-output
                        raise ValidationError(
                            f"node {node!r}: no split ratios for input {in_link.name!r}, "
                            f"commodity {cname!r}"
                        )
                    breakpoints = sorted(
                        {0.0}
                        | {t for p in profiles if p is not None for t in p.times}
                    )
                    for t in breakpoints:
                        total = sum(
                            p.value_at(t) for p in profiles if p is not None
                        )
                        if abs(total - 1.0) > 1e-9:
                            raise ValidationError(
                                f"node {node!r}: split ratios for input "
                                f"{in_link.name!r}, commodity {cname!r} sum to "
                                f"{total} at t={t}"
                            )
        for node, in_name, blocker, blocked, interval in self.restriction_entries:
            if node not in junctions:
                raise ValidationError(f"restriction at {node!r}: not a junction")
            ins = [l.name for l in self.inputs_of(node)]
            outs = [l.name for l in self.outputs_of(node)]
            if in_name not in ins or blocker not in outs or blocked not in outs:
                raise ValidationError(
                    f"restriction at {node!r} references missing links"
                )
            if blocker == blocked:
                raise ValidationError(
                    f"restriction at {node!r}: a queue always blocks its own movement"
                )
            if not isinstance(interval, RestrictionInterval):
                raise ValidationError("restriction entries need a RestrictionInterval")
        sources = set(self.sources())
        for (node, cname) in self.demand_profiles:
            if node not in sources:
                raise ValidationError(f"demand profile at {node!r}: not a source")
            if cname not in self.commodity_names:
                raise ValidationError(f"demand profile at {node!r}: unknown commodity")
        sinks = set(self.sinks())
        for node in self.supply_profiles:
            if node not in sinks:
                raise ValidationError(f"supply profile at {node!r}: not a sink")

    def restriction_map(self, node: str) -> RestrictionMap:
        ins = [l.name for l in self.inputs_of(node)]
        outs = [l.name for l in self.outputs_of(node)]
        entries = {}
        for n, in_name, blocker, blocked, interval in self.restriction_entries:
            if n == node:
                entries[(ins.index(in_name), outs.index(blocker), outs.index(blocked))] = interval
        return RestrictionMap(entries)

    def split_ratio(self, node: str, in_name: str, out_name: str, cname: str, t: float) -> float:
        profile = self.splits.get((node, in_name, out_name, cname))
        if profile is None:
            return 1.0 if len(self.outputs_of(node)) == 1 else 0.0
        return profile.value_at(t)


@dataclass(frozen=True)
class Scenario:
    """A network plus initial densities, boundary demands, and run settings."""

    network: Network
    initial: Mapping[str, tuple]  # link name -> (cells, commodities) densities
    dt: float
    steps: int
    order: int = 2
    record_every: int = 1

    def __post_init__(self) -> None:
        initial = {
            name: tuple(tuple(float(v) for v in row) for row in rows)
            for name, rows in dict(self.initial).items()
        }
        object.__setattr__(self, "initial", initial)
        if self.order not in (1, 2):
            raise ValidationError(f"order must be 1 or 2, got {self.order}")
        if not math.isfinite(self.dt) or self.dt <= 0.0:
            raise ValidationError("timestep must be positive")
        if self.steps < 1:
            raise ValidationError("at least one step is required")
        if self.record_every < 1:
            raise ValidationError("record cadence must be at least 1")
        c = self.network.commodities.count
        for link in self.network.links:
            rows = initial.get(link.name)
            if rows is None:
                raise ValidationError(f"initial densities missing for link {link.name!r}")
            if len(rows) != link.cells or any(len(r) != c for r in rows):
                raise ValidationError(
                    f"initial densities for link {link.name!r} must be "
                    f"{link.cells} cells x {c} commodities"
                )
            for row in rows:
                total = sum(row)
                if min(row) < 0.0:
                    raise ValidationError(f"negative initial density on {link.name!r}")
                if total > link.diagram.rho_max * (1.0 + 1e-12):
                    raise ValidationError(
                        f"initial density on {link.name!r} exceeds jam density"
                    )
        extra = set(initial) - {l.name for l in self.network.links}
        if extra:
            raise ValidationError(f"initial densities for unknown links: {sorted(extra)}")
        bound = cfl_bound(self.network)
        if self.dt > bound * (1.0 + 1e-12):
            raise CFLError(
                f"timestep {self.dt} exceeds the CFL bound {bound}"
            )


@dataclass
class SimState:
    """Mutable-by-copy simulation state: densities plus the conservation ledger."""

    time: float
    step_index: int
    densities: dict[str, np.ndarray]  # link name -> (cells, C)
    entered: np.ndarray  # cumulative vehicles per commodity
    exited: np.ndarray

    def copy(self) -> "SimState":
        return SimState(
            time=self.time,
            step_index=self.step_index,
            densities={k: v.copy() for k, v in self.densities.items()},
            entered=self.entered.copy(),
            exited=self.exited.copy(),
        )


@dataclass
class SimOutput:
    """Recorded trajectories: densities, junction flows, conservation ledger."""

    commodity_names: tuple[str, ...]
    times: list[float]
    densities: dict[str, np.ndarray]  # link -> (records, cells, C)
    node_flows: list[tuple[float, str, str, str, str, float]]
    ledger: list[tuple[float, str, float, float, float]]

    def conservation_error(self) -> float:
        """Worst relative drift of stored + exited - entered per commodity."""
        by_time: dict[float, dict[str, tuple[float, float, float]]] = {}
        for t, cname, entered, exited, stored in self.ledger:
            by_time.setdefault(t, {})[cname] = (entered, exited, stored)
        times = sorted(by_time)
        worst = 0.0
        for cname in self.commodity_names:
            e0, x0, s0 = by_time[times[0]][cname]
            base = s0 + x0 - e0
            scale = max(1.0, abs(s0), max(abs(v[2]) for tv in by_time.values() for v in [tv[cname]]))
            for t in times:
                e, x, s = by_time[t][cname]
                worst = max(worst, abs((s + x - e) - base) / scale)
        return worst


def cfl_bound(network: Network) -> float:
    """Largest stable timestep: no vehicle crosses a full cell per step."""
    bound = math.inf
    for link in network.links:
        v_max = max(
            link.diagram.velocity(0.0, w) for w in network.commodities.properties
        )
        if v_max > 0.0:
            bound = min(bound, link.cell_length / v_max)
    return bound


def _boundary_flux(
    up: np.ndarray,
    down: np.ndarray,
    link: Link,
    commodities: CommoditySet,
    dt: float,
) -> np.ndarray:
    """Vehicles per commodity crossing an internal cell boundary this step."""
    rho_up = float(up.sum())
    if rho_up <= 0.0:
        return np.zeros_like(up)
    w_up = commodities.mix(up)
    send = min(link.diagram.demand_rate(min(rho_up, link.diagram.rho_max), w_up), link.capacity)
    down_state = LinkState(
        densities=tuple(float(v) for v in down),
        length=link.cell_length,
        commodities=commodities,
    )
    receive = min(supply_1to1(w_up, down_state, link.diagram), link.capacity)
    flux = min(send, receive) * dt
    return flux * (up / rho_up)


def _first_order_supply(
    out_link: Link,
    first_cell: np.ndarray,
    incoming_directed: np.ndarray,
    commodities: CommoditySet,
    dt: float,
) -> float:
    """Classic fixed supply of a downstream cell, in vehicles per step.

    An empty cell has no net property of its own; the incoming demand mix
    stands in for it (and the free-flow branch makes the density irrelevant).
    """
    rho = float(first_cell.sum())
    if rho > 0.0:
        w = commodities.mix(first_cell)
    elif incoming_directed.sum() > 0.0:
        w = commodities.mix(incoming_directed)
    else:
        w = commodities.w_max
    shape = out_link.diagram.supply_shape(min(rho, out_link.diagram.rho_max), w)
    return min(shape, out_link.capacity) * dt


def _junction_flows(
    network: Network,
    state: SimState,
    node: str,
    order: int,
    dt: float,
) -> tuple[list[Link], list[Link], np.ndarray]:
    """Solve the node problem one junction poses this step."""
    commodities = network.commodities
    inputs = network.inputs_of(node)
    outputs = network.outputs_of(node)
    m, n, c = len(inputs), len(outputs), commodities.count

    demands = np.zeros((m, c))
    capacities = []
    priorities = []
    for i, link in enumerate(inputs):
        cell = state.densities[link.name][-1]
        rho = float(cell.sum())
        if rho > 0.0:
            w = commodities.mix(cell)
            total = min(link.diagram.demand_rate(min(rho, link.diagram.rho_max), w), link.capacity) * dt
            demands[i] = total * (cell / rho)
        capacities.append(link.capacity * dt)
        priorities.append(link.priority * dt)

    splits = np.zeros((m, n, c))
    for i, in_link in enumerate(inputs):
        for j, out_link in enumerate(outputs):
            for k, cname in enumerate(network.commodity_names):
                splits[i, j, k] = network.split_ratio(
                    node, in_link.name, out_link.name, cname, state.time
                )
    restrictions = network.restriction_map(node)

    if order == 1:
        directed = splits * demands[:, None, :]
        supplies = []
        for j, out_link in enumerate(outputs):
            supplies.append(
                _first_order_supply(
                    out_link,
                    state.densities[out_link.name][0],
                    directed[:, j, :].sum(axis=0),
                    commodities,
                    dt,
                )
            )
        problem = NodeProblem1(
            demands=demands.tolist(),
            splits=splits.tolist(),
            supplies=tuple(supplies),
            priorities=tuple(priorities),
            restrictions=restrictions,
            capacities=tuple(capacities),
        )
        flows = solve_first_order(problem).flows
    else:
        downstream = tuple(
            LinkState(
                densities=tuple(float(v) for v in state.densities[out.name][0]),
                length=out.cell_length,
                commodities=commodities,
            )
            for out in outputs
        )
        problem = NodeProblem2(
            demands=demands.tolist(),
            splits=splits.tolist(),
            priorities=tuple(priorities),
            commodities=commodities,
            downstream=downstream,
            diagrams=tuple(out.diagram for out in outputs),
            restrictions=restrictions,
            capacities=tuple(capacities),
            time_scale=dt,
        )
        flows = solve_second_order(problem).flows
    return inputs, outputs, flows


def _step_detail(
    state: SimState, scenario: Scenario
) -> tuple[SimState, list[tuple[float, str, str, str, str, float]]]:
    network = scenario.network
    dt = scenario.dt
    if dt > cfl_bound(network) * (1.0 + 1e-12):
        raise CFLError(f"timestep {dt} exceeds the CFL bound {cfl_bound(network)}")
    commodities = network.commodities
    deltas = {name: np.zeros_like(arr) for name, arr in state.densities.items()}
    entered = state.entered.copy()
    exited = state.exited.copy()
    flow_records: list[tuple[float, str, str, str, str, float]] = []

    # Internal cell boundaries (pre-step state everywhere).
    for link in network.links:
        arr = state.densities[link.name]
        inv_len = 1.0 / link.cell_length
        for b in range(link.cells - 1):
            flux = _boundary_flux(arr[b], arr[b + 1], link, commodities, dt)
            deltas[link.name][b] -= flux * inv_len
            deltas[link.name][b + 1] += flux * inv_len

    # Junctions.
    for node in network.junctions():
        inputs, outputs, flows = _junction_flows(
            network, state, node, scenario.order, dt
        )
        for i, in_link in enumerate(inputs):
            out_per_c = flows[i].sum(axis=0)
            deltas[in_link.name][-1] -= out_per_c / in_link.cell_length
        for j, out_link in enumerate(outputs):
            in_per_c = flows[:, j, :].sum(axis=0)
            deltas[out_link.name][0] += in_per_c / out_link.cell_length
        for i, in_link in enumerate(inputs):
            for j, out_link in enumerate(outputs):
                for k, cname in enumerate(network.commodity_names):
                    flow_records.append(
                        (state.time, node, in_link.name, out_link.name, cname, float(flows[i, j, k]))
                    )

    # Boundary inflows and outflows.
    for node in network.sources():
        out_link = network.outputs_of(node)[0]
        values = np.array(
            [
                network.demand_profiles.get((node, cname), PiecewiseConstant.constant(0.0)).value_at(state.time)
                for cname in network.commodity_names
            ]
        )
        total_rate = float(values.sum())
        if total_rate <= 0.0:
            continue
        w_in = commodities.mix(values)
        first = state.densities[out_link.name][0]
        down_state = LinkState(
            densities=tuple(float(v) for v in first),
            length=out_link.cell_length,
            commodities=commodities,
        )
        accept = min(supply_1to1(w_in, down_state, out_link.diagram), out_link.capacity) * dt
        inflow_total = min(total_rate * dt, accept)
        inflow = inflow_total * (values / total_rate)
        deltas[out_link.name][0] += inflow / out_link.cell_length
        entered += inflow

    for node in network.sinks():
        in_link = network.inputs_of(node)[0]
        last = state.densities[in_link.name][-1]
        rho = float(last.sum())
        if rho <= 0.0:
            continue
        w = commodities.mix(last)
        send = min(in_link.diagram.demand_rate(min(rho, in_link.diagram.rho_max), w), in_link.capacity)
        limit = network.supply_profiles.get(node)
        accept = limit.value_at(state.time) if limit is not None else math.inf
        outflow_total = min(send, accept) * dt
        outflow = outflow_total * (last / rho)
        deltas[in_link.name][-1] -= outflow / in_link.cell_length
        exited += outflow

    new_densities = {}
    for link in network.links:
        arr = state.densities[link.name] + deltas[link.name]
        low = float(arr.min())
        if low < -1e-9 * link.diagram.rho_max:
            raise NumericalError(
                f"negative density on link {link.name!r}: {low}"
            )
        np.clip(arr, 0.0, None, out=arr)
        high = float(arr.sum(axis=1).max())
        if high > link.diagram.rho_max * (1.0 + 1e-9):
            raise NumericalError(
                f"density above jam on link {link.name!r}: {high}"
            )
        new_densities[link.name] = arr

    new_state = SimState(
        time=state.time + dt,
        step_index=state.step_index + 1,
        densities=new_densities,
        entered=entered,
        exited=exited,
    )
    return new_state, flow_records


def step(state: SimState, scenario: Scenario) -> SimState:
    """Advance the simulation by one timestep (pure: returns a new state)."""
    return _step_detail(state, scenario)[0]


def initial_state(scenario: Scenario) -> SimState:
    c = scenario.network.commodities.count
    densities = {
        link.name: np.array(scenario.initial[link.name], dtype=float).reshape(
            link.cells, c
        )
        for link in scenario.network.links
    }
    return SimState(
        time=0.0,
        step_index=0,
        densities=densities,
        entered=np.zeros(c),
        exited=np.zeros(c),
    )


def _stored(network: Network, state: SimState) -> np.ndarray:
    total = np.zeros(network.commodities.count)
    for link in network.links:
        total += state.densities[link.name].sum(axis=0) * link.cell_length
    return total


def run(scenario: Scenario) -> SimOutput:
    """Run the scenario over its horizon, recording at the configured cadence."""
    network = scenario.network
    state = initial_state(scenario)
    times = [state.time]
    densities: dict[str, list[np.ndarray]] = {
        link.name: [state.densities[link.name].copy()] for link in network.links
    }
    node_flows: list[tuple[float, str, str, str, str, float]] = []
    ledger: list[tuple[float, str, float, float, float]] = []

    def record_ledger(st: SimState) -> None:
        stored = _stored(network, st)
        for k, cname in enumerate(network.commodity_names):
            ledger.append(
                (st.time, cname, float(st.entered[k]), float(st.exited[k]), float(stored[k]))
            )

    record_ledger(state)
    for k in range(scenario.steps):
        state, records = _step_detail(state, scenario)
        if (k + 1) % scenario.record_every == 0 or k == scenario.steps - 1:
            times.append(state.time)
            for link in network.links:
                densities[link.name].append(state.densities[link.name].copy())
            node_flows.extend(records)
            record_ledger(state)

    return SimOutput(
        commodity_names=network.commodity_names,
        times=times,
        densities={name: np.stack(stack) for name, stack in densities.items()},
        node_flows=node_flows,
        ledger=ledger,
    )
