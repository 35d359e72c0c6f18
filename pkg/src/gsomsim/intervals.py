"""Restriction intervals on [0, 1] and their union measures.

Queues block lane ranges of other movements; the blocked fraction is the
Lebesgue measure of the union of the active intervals.  The two-dimensional
variant measures unions of rectangles ``interval x [a, 1]``, which is what
the capacity form of the partial-FIFO constraint needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

from .errors import ValidationError

__all__ = [
    "RestrictionInterval",
    "RestrictionMap",
    "union_measure",
    "rectangle_union_area",
]


@dataclass(frozen=True, order=True)
class RestrictionInterval:
    """Closed subinterval [left, right] of [0, 1]."""

    left: float
    right: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "left", float(self.left))
        object.__setattr__(self, "right", float(self.right))
        if not 0.0 <= self.left <= self.right <= 1.0:
            raise ValidationError(
                f"restriction interval needs 0 <= left <= right <= 1, "
                f"got [{self.left}, {self.right}]"
            )

    @property
    def measure(self) -> float:
        return self.right - self.left


def union_measure(intervals: Iterable[RestrictionInterval]) -> float:
    """Measure of the union of intervals, by endpoint sort and sweep."""
    spans = sorted(
        (iv.left, iv.right) for iv in intervals if iv.right > iv.left
    )
    total = 0.0
    cur_left = cur_right = None
    for left, right in spans:
        if cur_right is None or left > cur_right:
            if cur_right is not None:
                total += cur_right - cur_left
            cur_left, cur_right = left, right
        elif right > cur_right:
            cur_right = right
    if cur_right is not None:
        total += cur_right - cur_left
    return min(total, 1.0)


def rectangle_union_area(
    rects: Iterable[tuple[RestrictionInterval, float]]
) -> float:
    """Area of the union of rectangles ``interval x [a, 1]`` within [0,1]^2.

    Sweeps the sorted ``a`` breakpoints; each horizontal strip contributes its
    height times the union measure of the intervals active there.
    """
    items = []
    for interval, a in rects:
        a = float(a)
        if not 0.0 <= a <= 1.0:
            raise ValidationError(f"rectangle base must lie in [0, 1], got {a}")
        if interval.measure > 0.0 and a < 1.0:
            items.append((a, interval))
    if not items:
        return 0.0
    items.sort(key=lambda pair: pair[0])
    breakpoints = sorted({a for a, _ in items} | {1.0})
    area = 0.0
    active: list[RestrictionInterval] = []
    idx = 0
    for lo, hi in zip(breakpoints, breakpoints[1:]):
        while idx < len(items) and items[idx][0] <= lo:
            active.append(items[idx][1])
            idx += 1
        area += (hi - lo) * union_measure(active)
    return min(area, 1.0)


@dataclass(frozen=True)
class RestrictionMap:
    """Restriction intervals per input and ordered output pair.

    ``entries[(i, blocker, blocked)]`` is the lane range of input ``i``'s
    movement to ``blocked`` that a queue for output ``blocker`` occupies.
    Absent entries mean "no restriction"; zero-measure entries are dropped.
    Self entries (``blocker == blocked``) are forbidden: a queue always fully
    blocks its own movement, which the solvers apply implicitly.
    """

    entries: Mapping[tuple[int, int, int], RestrictionInterval] = field(
        default_factory=dict
    )

    def __post_init__(self) -> None:
        normalized: dict[tuple[int, int, int], RestrictionInterval] = {}
        for key, value in dict(self.entries).items():
            i, blocker, blocked = (int(k) for k in key)
            if blocker == blocked:
                raise ValidationError(
                    f"self restriction ({i}, {blocker}, {blocked}) is not allowed"
                )
            if min(i, blocker, blocked) < 0:
                raise ValidationError(f"negative index in restriction key {key}")
            if not isinstance(value, RestrictionInterval):
                value = RestrictionInterval(*value)
            if value.measure > 0.0:
                normalized[(i, blocker, blocked)] = value
        object.__setattr__(self, "entries", normalized)

    @classmethod
    def full_fifo(cls, num_inputs: int, num_outputs: int) -> "RestrictionMap":
        """Every queue blocks every other movement of its input entirely."""
        full = RestrictionInterval(0.0, 1.0)
        return cls(
            {
                (i, jp, j): full
                for i in range(num_inputs)
                for jp in range(num_outputs)
                for j in range(num_outputs)
                if jp != j
            }
        )

    def get(self, i: int, blocker: int, blocked: int) -> RestrictionInterval | None:
        return self.entries.get((i, blocker, blocked))

    def intervals_onto(
        self, i: int, blocked: int, blockers: Iterable[int]
    ) -> list[RestrictionInterval]:
        """Intervals that the given queued outputs impose on movement (i, blocked)."""
        found = []
        for blocker in blockers:
            interval = self.entries.get((i, blocker, blocked))
            if interval is not None:
                found.append(interval)
        return found

    def __iter__(self) -> Iterator[tuple[tuple[int, int, int], RestrictionInterval]]:
        return iter(sorted(self.entries.items()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RestrictionMap):
            return NotImplemented
        return dict(self.entries) == dict(other.entries)

    def __hash__(self) -> int:
        return hash(tuple(sorted(self.entries.items())))
