"""Random node-problem generators for property and acceptance testing."""

from __future__ import annotations

import math

import numpy as np

from .fd import CommoditySet, GreenshieldsDiagram, LinkState
from .intervals import RestrictionInterval, RestrictionMap
from .node_first_order import NodeProblem1
from .node_second_order import NodeProblem2

__all__ = [
    "random_first_order_problem",
    "random_supply_constrained_merge",
    "random_second_order_problem",
]


def _random_splits(rng: np.random.Generator, m: int, n: int, c: int) -> list:
    """Split ratios summing to one per (input, commodity), with some zeros."""
    splits = [[[0.0] * c for _ in range(n)] for _ in range(m)]
    for i in range(m):
        for k in range(c):
            weights = rng.exponential(1.0, size=n)
            if n > 1 and rng.random() < 0.3:
                weights[rng.integers(0, n)] = 0.0
            total = weights.sum()
            if total <= 0.0:
                weights[:] = 1.0
                total = float(n)
            for j in range(n):
                splits[i][j][k] = float(weights[j] / total)
    return splits


def _random_restrictions(
    rng: np.random.Generator, m: int, n: int
) -> RestrictionMap:
    if n < 2:
        return RestrictionMap()
    if rng.random() < 0.15:
        return RestrictionMap.full_fifo(m, n)
    entries = {}
    for i in range(m):
        for blocker in range(n):
            for blocked in range(n):
                if blocker == blocked or rng.random() >= 0.35:
                    continue
                if rng.random() < 0.3:
                    entries[(i, blocker, blocked)] = RestrictionInterval(0.0, 1.0)
                else:
                    a, b = sorted(rng.uniform(0.0, 1.0, size=2))
                    if b > a:
                        entries[(i, blocker, blocked)] = RestrictionInterval(a, b)
    return RestrictionMap(entries)


def random_first_order_problem(
    rng: np.random.Generator,
    max_inputs: int = 4,
    max_outputs: int = 4,
    max_commodities: int = 3,
) -> NodeProblem1:
    """A random first-order node problem within the given size limits."""
    m = int(rng.integers(1, max_inputs + 1))
    n = int(rng.integers(1, max_outputs + 1))
    c = int(rng.integers(1, max_commodities + 1))
    demands = rng.uniform(0.0, 10.0, size=(m, c))
    for i in range(m):
        if rng.random() < 0.1:
            demands[i] = 0.0
    splits = _random_splits(rng, m, n, c)
    total_demand = max(demands.sum(), 1.0)
    supplies = []
    for _ in range(n):
        u = rng.random()
        if u < 0.08:
            supplies.append(0.0)
        elif u < 0.18:
            supplies.append(math.inf)
        else:
            supplies.append(float(rng.uniform(0.05, 1.2) * total_demand / n))
    priorities = rng.uniform(0.5, 5.0, size=m)
    capacities = None
    if rng.random() < 0.5:
        capacities = tuple(
            float(max(demands[i].sum(), 1e-6) * rng.uniform(1.0, 1.8)) for i in range(m)
        )
    return NodeProblem1(
        demands=[list(row) for row in demands],
        splits=splits,
        supplies=tuple(supplies),
        priorities=tuple(float(p) for p in priorities),
        restrictions=_random_restrictions(rng, m, n),
        capacities=capacities,
    )


def random_supply_constrained_merge(
    rng: np.random.Generator,
    max_inputs: int = 4,
    max_commodities: int = 3,
) -> NodeProblem1:
    """A merge whose single output supply binds before any demand runs out."""
    m = int(rng.integers(2, max_inputs + 1))
    c = int(rng.integers(1, max_commodities + 1))
    priorities = rng.uniform(0.5, 5.0, size=m)
    demands = rng.uniform(1.0, 10.0, size=(m, c))
    exhaustion = (demands.sum(axis=1) / priorities).min()
    # Fill time R / sum(p) strictly before the earliest demand exhaustion.
    supply = float(priorities.sum() * exhaustion * rng.uniform(0.2, 0.9))
    splits = [[[1.0] * c] for _ in range(m)]
    return NodeProblem1(
        demands=[list(row) for row in demands],
        splits=splits,
        supplies=(supply,),
        priorities=tuple(float(p) for p in priorities),
    )


def random_second_order_problem(
    rng: np.random.Generator,
    max_inputs: int = 4,
    max_outputs: int = 4,
    max_commodities: int = 3,
    uniform_property: bool = False,
    one_to_one: bool = False,
) -> NodeProblem2:
    """A random second-order node problem.

    Demands come from random upstream states through the demand function, and
    the time scale respects the cell-transit bound, matching how a network
    simulator poses node problems.
    """
    if one_to_one:
        m = n = 1
    else:
        m = int(rng.integers(1, max_inputs + 1))
        n = int(rng.integers(1, max_outputs + 1))
    c = int(rng.integers(1, max_commodities + 1))
    if uniform_property:
        w = float(rng.uniform(8.0, 35.0))
        commodities = CommoditySet((w,) * c)
    else:
        commodities = CommoditySet(tuple(rng.uniform(5.0, 40.0, size=c)))
    rho_max = float(rng.uniform(60.0, 150.0))
    diagram = GreenshieldsDiagram(rho_max=rho_max)

    lengths = rng.uniform(50.0, 200.0, size=n)
    time_scale = float(
        rng.uniform(0.2, 0.95) * lengths.min() / commodities.w_max
    )

    downstream = []
    for j in range(n):
        u = rng.random()
        if u < 0.07:
            rho_total = 0.0
        elif u < 0.14:
            rho_total = rho_max
        else:
            rho_total = float(rng.uniform(0.0, rho_max))
        shares = rng.dirichlet(np.ones(c)) if c > 1 else np.ones(1)
        downstream.append(
            LinkState(
                densities=tuple(rho_total * shares),
                length=float(lengths[j]),
                commodities=commodities,
            )
        )

    demands = np.zeros((m, c))
    capacities = []
    for i in range(m):
        rho_up_total = float(rng.uniform(0.05, 1.0) * rho_max)
        shares = rng.dirichlet(np.ones(c)) if c > 1 else np.ones(1)
        dens = rho_up_total * shares
        w_up = commodities.mix(dens)
        total = diagram.demand_rate(rho_up_total, w_up) * time_scale
        demands[i] = total * shares
        capacities.append(diagram.capacity(w_up) * time_scale)

    priorities = tuple(float(p) for p in rng.uniform(0.5, 5.0, size=m))
    splits = _random_splits(rng, m, n, c)
    return NodeProblem2(
        demands=[list(row) for row in demands],
        splits=splits,
        priorities=priorities,
        commodities=commodities,
        downstream=tuple(downstream),
        diagrams=(diagram,) * n,
        restrictions=_random_restrictions(rng, m, n),
        capacities=tuple(capacities),
        time_scale=time_scale,
    )
