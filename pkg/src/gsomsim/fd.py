"""Fundamental-diagram core for generic second-order (GSOM) traffic flow.

Each vehicle commodity carries a constant property value ``w`` that selects
its density-velocity curve from a one-parameter family.  A link state stores
per-commodity densities; its net property is the density-weighted commodity
average.  Demand, supply, and the boundary middle state follow the standard
Godunov construction for this model family.

Unit conventions
----------------
density        veh / distance
property ``w`` distance / time under the built-in families (interpretable as
               a commodity's free-flow speed); any positive scalar otherwise
speed          distance / time
flow           veh / time
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import (
    DomainError,
    EmptyLinkError,
    InfeasibleSpeedError,
    NumericalError,
    ValidationError,
)

__all__ = [
    "CommoditySet",
    "LinkState",
    "MiddleState",
    "FundamentalDiagram",
    "GreenshieldsDiagram",
    "TabulatedDiagram",
    "net_property",
    "velocity",
    "invert_density",
    "demand",
    "middle_state",
    "supply_1to1",
    "INVERSION_TOL_FACTOR",
]

# Absolute inversion tolerance is this factor times the jam density: far below
# any physically meaningful density difference.
INVERSION_TOL_FACTOR = 1e-9

_BISECTION_MAX_STEPS = 200


@dataclass(frozen=True)
class CommoditySet:
    """Per-commodity property values, constant for the life of a scenario."""

    properties: tuple[float, ...]

    def __post_init__(self) -> None:
        props = tuple(float(w) for w in self.properties)
        object.__setattr__(self, "properties", props)
        if not props:
            raise ValidationError("a commodity set needs at least one commodity")
        for idx, w in enumerate(props):
            if not math.isfinite(w) or w <= 0.0:
                raise ValidationError(
                    f"commodity {idx}: property must be positive and finite, got {w}"
                )

    @property
    def count(self) -> int:
        return len(self.properties)

    @property
    def w_min(self) -> float:
        return min(self.properties)

    @property
    def w_max(self) -> float:
        return max(self.properties)

    def mix(self, weights: Sequence[float]) -> float:
        """Weighted average property. The weights must have a positive sum."""
        if len(weights) != self.count:
            raise ValidationError(
                f"expected {self.count} weights, got {len(weights)}"
            )
        total = float(sum(weights))
        if total <= 0.0:
            raise EmptyLinkError("property mix requested with non-positive total weight")
        return sum(w * q for w, q in zip(self.properties, weights)) / total


@dataclass(frozen=True)
class LinkState:
    """Per-commodity densities of one finite-volume link or cell."""

    densities: tuple[float, ...]
    length: float
    commodities: CommoditySet

    def __post_init__(self) -> None:
        dens = tuple(float(r) for r in self.densities)
        object.__setattr__(self, "densities", dens)
        if len(dens) != self.commodities.count:
            raise ValidationError(
                f"state has {len(dens)} densities for {self.commodities.count} commodities"
            )
        for idx, r in enumerate(dens):
            if not math.isfinite(r) or r < 0.0:
                raise ValidationError(
                    f"commodity {idx}: density must be nonnegative and finite, got {r}"
                )
        if not math.isfinite(self.length) or self.length <= 0.0:
            raise ValidationError(f"link length must be positive, got {self.length}")

    @property
    def total_density(self) -> float:
        return sum(self.densities)

    @property
    def is_empty(self) -> bool:
        return self.total_density <= 0.0

    def net_property(self) -> float:
        """Density-weighted average property. Raises EmptyLinkError when empty."""
        if self.is_empty:
            raise EmptyLinkError("net property of an empty link is undefined")
        return self.commodities.mix(self.densities)

    def vehicles(self) -> tuple[float, ...]:
        """Vehicle counts per commodity (density times length)."""
        return tuple(r * self.length for r in self.densities)


@dataclass(frozen=True)
class MiddleState:
    """Riemann intermediate state at a boundary: property, speed, density."""

    w: float
    v: float
    rho: float


class FundamentalDiagram(ABC):
    """Velocity map ``V(rho, w)``, strictly decreasing in ``rho``.

    ``V(rho_max, w) = 0`` for every property value, and the speed is positive
    below jam density; that guarantees a unique density for every feasible
    speed, which the inversions here rely on.
    """

    rho_max: float

    def _check_args(self, rho: float, w: float) -> None:
        if not math.isfinite(w) or w <= 0.0:
            raise DomainError(f"property must be positive and finite, got {w}")
        if not math.isfinite(rho) or rho < 0.0 or rho > self.rho_max * (1.0 + 1e-12):
            raise DomainError(
                f"density {rho} outside [0, {self.rho_max}]"
            )

    @abstractmethod
    def velocity(self, rho: float, w: float) -> float:
        """Flow speed at the given density and property."""

    @abstractmethod
    def critical_density(self, w: float) -> float:
        """Density maximizing the flux ``rho * V(rho, w)``."""

    def max_speed(self, w: float) -> float:
        return self.velocity(0.0, w)

    def capacity(self, w: float) -> float:
        """Largest possible flux for property ``w``."""
        rho_c = self.critical_density(w)
        return rho_c * self.velocity(rho_c, w)

    def demand_rate(self, rho: float, w: float) -> float:
        """Flow the upstream side of a boundary can send."""
        self._check_args(rho, w)
        if rho <= self.critical_density(w):
            return rho * self.velocity(rho, w)
        return self.capacity(w)

    def supply_shape(self, rho: float, w: float) -> float:
        """Flow a link at density ``rho`` can accept from traffic of property ``w``."""
        self._check_args(rho, w)
        if rho <= self.critical_density(w):
            return self.capacity(w)
        return rho * self.velocity(rho, w)

    def invert_density(self, v: float, w: float) -> float:
        """The unique density with ``V(rho, w) = v``.

        Generic bisection; families with a closed-form inverse override this.
        """
        v_free = self.max_speed(w)
        if v > v_free * (1.0 + 1e-12) + 1e-300:
            raise InfeasibleSpeedError(
                f"speed {v} exceeds free-flow speed {v_free} for property {w}"
            )
        if v >= v_free:
            return 0.0
        if v <= 0.0:
            return self.rho_max
        tol = INVERSION_TOL_FACTOR * self.rho_max
        lo, hi = 0.0, self.rho_max
        for _ in range(_BISECTION_MAX_STEPS):
            mid = 0.5 * (lo + hi)
            if self.velocity(mid, w) > v:
                lo = mid
            else:
                hi = mid
            if hi - lo <= tol:
                return 0.5 * (lo + hi)
        raise NumericalError(
            f"density inversion did not converge for v={v}, w={w}"
        )


@dataclass(frozen=True)
class GreenshieldsDiagram(FundamentalDiagram):
    """Linear speed-density family ``V(rho, w) = w * (1 - rho / rho_max)``.

    The critical density is ``rho_max / 2`` and the capacity for property
    ``w`` is ``w * rho_max / 4``; the inversion has a closed form.
    """

    rho_max: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.rho_max) or self.rho_max <= 0.0:
            raise ValidationError(f"jam density must be positive, got {self.rho_max}")

    def velocity(self, rho: float, w: float) -> float:
        self._check_args(rho, w)
        return max(0.0, w * (1.0 - rho / self.rho_max))

    def critical_density(self, w: float) -> float:
        return 0.5 * self.rho_max

    def capacity(self, w: float) -> float:
        return 0.25 * w * self.rho_max

    def invert_density(self, v: float, w: float) -> float:
        if v > w * (1.0 + 1e-12) + 1e-300:
            raise InfeasibleSpeedError(
                f"speed {v} exceeds free-flow speed {w} for property {w}"
            )
        if v >= w:
            return 0.0
        if v <= 0.0:
            return self.rho_max
        return self.rho_max * (1.0 - v / w)


@dataclass(frozen=True)
class TabulatedDiagram(FundamentalDiagram):
    """Table-driven family ``V(rho, w) = w * g(rho / rho_max)``.

    ``points`` are ``(x, g)`` breakpoints on [0, 1] with ``g`` strictly
    decreasing from 1 to 0; speeds interpolate linearly between them.
    Densities are recovered by generic bisection.
    """

    rho_max: float
    points: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if not math.isfinite(self.rho_max) or self.rho_max <= 0.0:
            raise ValidationError(f"jam density must be positive, got {self.rho_max}")
        pts = tuple((float(x), float(g)) for x, g in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise ValidationError("tabulated diagram needs at least two breakpoints")
        if pts[0] != (0.0, 1.0) or pts[-1][0] != 1.0 or pts[-1][1] != 0.0:
            raise ValidationError(
                "breakpoints must start at (0, 1) and end at (1, 0)"
            )
        for (x0, g0), (x1, g1) in zip(pts, pts[1:]):
            if x1 <= x0 or g1 >= g0:
                raise ValidationError(
                    "breakpoints must be strictly increasing in x and strictly "
                    "decreasing in g"
                )

    def _shape(self, x: float) -> float:
        pts = self.points
        if x <= 0.0:
            return 1.0
        if x >= 1.0:
            return 0.0
        for (x0, g0), (x1, g1) in zip(pts, pts[1:]):
            if x <= x1:
                return g0 + (g1 - g0) * (x - x0) / (x1 - x0)
        return 0.0

    def velocity(self, rho: float, w: float) -> float:
        self._check_args(rho, w)
        return w * self._shape(min(rho, self.rho_max) / self.rho_max)

    def critical_density(self, w: float) -> float:
        # x * g(x) is quadratic on each segment; take the best segment vertex.
        best_x, best_val = 0.0, 0.0
        for (x0, g0), (x1, g1) in zip(self.points, self.points[1:]):
            slope = (g1 - g0) / (x1 - x0)
            intercept = g0 - slope * x0
            candidates = [x0, x1]
            if slope < 0.0:
                vertex = -intercept / (2.0 * slope)
                if x0 < vertex < x1:
                    candidates.append(vertex)
            for x in candidates:
                val = x * (intercept + slope * x)
                if val > best_val:
                    best_val, best_x = val, x
        return best_x * self.rho_max


def net_property(state: LinkState, commodities: CommoditySet | None = None) -> float:
    """Density-weighted average property of a link state."""
    if commodities is not None and commodities != state.commodities:
        raise ValidationError("commodity set does not match the link state")
    return state.net_property()


def velocity(rho: float, w: float, diagram: FundamentalDiagram) -> float:
    """Flow speed at density ``rho`` for property ``w``."""
    return diagram.velocity(rho, w)


def invert_density(v: float, w: float, diagram: FundamentalDiagram) -> float:
    """Density at which traffic of property ``w`` moves at speed ``v``."""
    return diagram.invert_density(v, w)


def demand(state: LinkState, diagram: FundamentalDiagram) -> float:
    """Flow the link can send downstream; zero for an empty link."""
    rho = state.total_density
    if rho <= 0.0:
        return 0.0
    return diagram.demand_rate(rho, state.net_property())


def middle_state(
    w_in: float, downstream: LinkState, diagram: FundamentalDiagram
) -> MiddleState:
    """Intermediate state between incoming traffic of property ``w_in`` and a
    downstream link.

    The incoming vehicles keep their property but move no faster than the
    downstream vehicles clear space.  An empty downstream link imposes no
    speed limit; its (undefined) net property is replaced by ``w_in``.
    """
    if w_in <= 0.0 or not math.isfinite(w_in):
        raise DomainError(f"incoming property must be positive and finite, got {w_in}")
    if downstream.is_empty:
        v_down = diagram.velocity(0.0, w_in)
    else:
        v_down = diagram.velocity(downstream.total_density, downstream.net_property())
    v_mid = min(diagram.velocity(0.0, w_in), v_down)
    rho_mid = diagram.invert_density(v_mid, w_in)
    return MiddleState(w=w_in, v=v_mid, rho=rho_mid)


def supply_1to1(
    w_in: float, downstream: LinkState, diagram: FundamentalDiagram
) -> float:
    """Flow a downstream link can accept from traffic of property ``w_in``."""
    mid = middle_state(w_in, downstream, diagram)
    if mid.rho <= diagram.critical_density(mid.w):
        return diagram.capacity(mid.w)
    return mid.rho * mid.v


def supply_from_middle(mid: MiddleState, diagram: FundamentalDiagram) -> float:
    """Supply implied by an already-computed middle state."""
    if mid.rho <= diagram.critical_density(mid.w):
        return diagram.capacity(mid.w)
    return mid.rho * mid.v


def uniform_state(
    rho_total: float,
    shares: Iterable[float],
    length: float,
    commodities: CommoditySet,
) -> LinkState:
    """Convenience constructor: split a total density by commodity shares."""
    shares = tuple(shares)
    total = sum(shares)
    if total <= 0.0:
        dens = tuple(0.0 for _ in shares)
    else:
        dens = tuple(rho_total * s / total for s in shares)
    return LinkState(densities=dens, length=length, commodities=commodities)
