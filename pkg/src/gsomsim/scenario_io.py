"""Deterministic, versioned text formats for scenarios, node problems, and results.

Two line-oriented input formats share one envelope: a header line
(``gsomsim scenario 1`` or ``gsomsim node 1``), ``#`` comments, and
``[section]`` blocks of whitespace-separated records.  The full grammar is
documented in ``docs/scenario-format.md``.  Results are written as
comma-separated tables with every float rendered at 17 significant digits,
so re-reading reproduces bit-identical values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .fd import (
    CommoditySet,
    FundamentalDiagram,
    GreenshieldsDiagram,
    LinkState,
    TabulatedDiagram,
)
from .intervals import RestrictionInterval, RestrictionMap
from .network import Link, Network, PiecewiseConstant, Scenario, SimOutput
from .node_first_order import Event, NodeProblem1, NodeSolution, TraceStep
from .node_second_order import NodeProblem2, NodeSolution2, SupplyState, TraceStep2

__all__ = [
    "load",
    "load_scenario",
    "load_node_problem",
    "save_scenario",
    "save_node_problem",
    "write_node_solution",
    "read_node_solution",
    "write_sim_output",
    "read_table",
]

SCENARIO_HEADER = "gsomsim scenario 1"
NODE_HEADER = "gsomsim node 1"


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(float(x), ".17g")


def _parse_float(token: str, where: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise ValidationError(f"{where}: expected a number, got {token!r}") from None


def _parse_int(token: str, where: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise ValidationError(f"{where}: expected an integer, got {token!r}") from None


def _parse_profile(token: str, where: str) -> PiecewiseConstant:
    times, values = [], []
    for piece in token.split(","):
        if ":" not in piece:
            raise ValidationError(f"{where}: profile entries look like t:value")
        t_str, v_str = piece.split(":", 1)
        times.append(_parse_float(t_str, where))
        values.append(_parse_float(v_str, where))
    try:
        return PiecewiseConstant(times=tuple(times), values=tuple(values))
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def _profile_str(profile: PiecewiseConstant) -> str:
    return ",".join(f"{_fmt(t)}:{_fmt(v)}" for t, v in zip(profile.times, profile.values))


def _split_kv(tokens: list[str], where: str) -> dict[str, str]:
    out = {}
    for token in tokens:
        if "=" not in token:
            raise ValidationError(f"{where}: expected key=value, got {token!r}")
        key, value = token.split("=", 1)
        out[key] = value
    return out


class _Sections:
    """Header check plus section splitting with line numbers preserved."""

    def __init__(self, path: Path, expected_header: str | None = None):
        self.path = path
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise exc
        self.sections: dict[str, list[tuple[int, list[str]]]] = {}
        self.header: str | None = None
        current: str | None = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if self.header is None:
                self.header = line
                if expected_header is not None and line != expected_header:
                    raise ValidationError(
                        f"{path}:{lineno}: expected header {expected_header!r}, got {line!r}"
                    )
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                self.sections.setdefault(current, [])
                continue
            if current is None:
                raise ValidationError(f"{path}:{lineno}: content before any [section]")
            self.sections[current].append((lineno, line.split()))
        if self.header is None:
            raise ValidationError(f"{path}: empty file")

    def rows(self, name: str) -> list[tuple[int, list[str]]]:
        return self.sections.get(name, [])

    def where(self, lineno: int) -> str:
        return f"{self.path}:{lineno}"


def _parse_diagrams(sections: _Sections) -> dict[str, FundamentalDiagram]:
    diagrams: dict[str, FundamentalDiagram] = {}
    for lineno, tokens in sections.rows("diagrams"):
        where = sections.where(lineno)
        if len(tokens) < 3:
            raise ValidationError(f"{where}: diagram lines are 'name family key=value...'")
        name, family = tokens[0], tokens[1]
        kv = _split_kv(tokens[2:], where)
        if "rho_max" not in kv:
            raise ValidationError(f"{where}: diagram {name!r} needs rho_max=")
        rho_max = _parse_float(kv["rho_max"], where)
        try:
            if family == "greenshields":
                diagrams[name] = GreenshieldsDiagram(rho_max=rho_max)
            elif family == "tabulated":
                if "points" not in kv:
                    raise ValidationError(f"{where}: tabulated diagram needs points=")
                pts = []
                for piece in kv["points"].split(","):
                    x_str, g_str = piece.split(":", 1)
                    pts.append((_parse_float(x_str, where), _parse_float(g_str, where)))
                diagrams[name] = TabulatedDiagram(rho_max=rho_max, points=tuple(pts))
            else:
                raise ValidationError(f"{where}: unknown diagram family {family!r}")
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    return diagrams


def _parse_commodities(sections: _Sections) -> tuple[CommoditySet, tuple[str, ...]]:
    names, props = [], []
    for lineno, tokens in sections.rows("commodities"):
        where = sections.where(lineno)
        if len(tokens) != 2:
            raise ValidationError(f"{where}: commodity lines are 'name property'")
        names.append(tokens[0])
        props.append(_parse_float(tokens[1], where))
    if not names:
        raise ValidationError(f"{sections.path}: a [commodities] section is required")
    if len(set(names)) != len(names):
        raise ValidationError(f"{sections.path}: duplicate commodity names")
    return CommoditySet(tuple(props)), tuple(names)


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------


def load_scenario(path: str | Path) -> Scenario:
    """Parse and fully validate a scenario file."""
    path = Path(path)
    sections = _Sections(path, SCENARIO_HEADER)
    commodities, commodity_names = _parse_commodities(sections)
    diagrams = _parse_diagrams(sections)

    links = []
    for lineno, tokens in sections.rows("links"):
        where = sections.where(lineno)
        if len(tokens) < 4:
            raise ValidationError(
                f"{where}: link lines are 'name from to key=value...'"
            )
        kv = _split_kv(tokens[3:], where)
        for key in ("length", "cells", "diagram", "capacity"):
            if key not in kv:
                raise ValidationError(f"{where}: link {tokens[0]!r} needs {key}=")
        if kv["diagram"] not in diagrams:
            raise ValidationError(f"{where}: unknown diagram {kv['diagram']!r}")
        links.append(
            Link(
                name=tokens[0],
                upstream=tokens[1],
                downstream=tokens[2],
                length=_parse_float(kv["length"], where),
                cells=_parse_int(kv["cells"], where),
                diagram=diagrams[kv["diagram"]],
                capacity=_parse_float(kv["capacity"], where),
                priority=_parse_float(kv["priority"], where) if "priority" in kv else None,
            )
        )

    splits = {}
    for lineno, tokens in sections.rows("splits"):
        where = sections.where(lineno)
        if len(tokens) != 5:
            raise ValidationError(f"{where}: split lines are 'node in out commodity profile'")
        node, in_name, out_name, cname, profile = tokens
        targets = commodity_names if cname == "*" else (cname,)
        for target in targets:
            splits[(node, in_name, out_name, target)] = _parse_profile(profile, where)

    restriction_entries = []
    for lineno, tokens in sections.rows("restrictions"):
        where = sections.where(lineno)
        if len(tokens) != 6:
            raise ValidationError(
                f"{where}: restriction lines are 'node in blocker blocked y z'"
            )
        y = _parse_float(tokens[4], where)
        z = _parse_float(tokens[5], where)
        try:
            interval = RestrictionInterval(y, z)
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
        restriction_entries.append((tokens[0], tokens[1], tokens[2], tokens[3], interval))

    demand_profiles = {}
    for lineno, tokens in sections.rows("demands"):
        where = sections.where(lineno)
        if len(tokens) != 3:
            raise ValidationError(f"{where}: demand lines are 'source commodity profile'")
        demand_profiles[(tokens[0], tokens[1])] = _parse_profile(tokens[2], where)

    supply_profiles = {}
    for lineno, tokens in sections.rows("supplies"):
        where = sections.where(lineno)
        if len(tokens) != 2:
            raise ValidationError(f"{where}: supply lines are 'sink profile'")
        supply_profiles[tokens[0]] = _parse_profile(tokens[1], where)

    try:
        network = Network(
            commodities=commodities,
            commodity_names=commodity_names,
            links=tuple(links),
            splits=splits,
            restriction_entries=tuple(restriction_entries),
            demand_profiles=demand_profiles,
            supply_profiles=supply_profiles,
        )
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None

    by_name = {ln.name: ln for ln in links}
    c = commodities.count
    initial = {
        ln.name: [[0.0] * c for _ in range(ln.cells)] for ln in links
    }
    for lineno, tokens in sections.rows("initial"):
        where = sections.where(lineno)
        if len(tokens) != 4:
            raise ValidationError(f"{where}: initial lines are 'link cell commodity value'")
        link_name, cell_token, cname, value_token = tokens
        if link_name not in by_name:
            raise ValidationError(f"{where}: unknown link {link_name!r}")
        if cname not in commodity_names:
            raise ValidationError(f"{where}: unknown commodity {cname!r}")
        k = commodity_names.index(cname)
        value = _parse_float(value_token, where)
        link = by_name[link_name]
        if cell_token == "all":
            cells = range(link.cells)
        else:
            idx = _parse_int(cell_token, where)
            if not 1 <= idx <= link.cells:
                raise ValidationError(
                    f"{where}: cell {idx} out of range for link {link_name!r}"
                )
            cells = range(idx - 1, idx)
        for cell in cells:
            initial[link_name][cell][k] = value

    run_rows = sections.rows("run")
    if not run_rows:
        raise ValidationError(f"{path}: a [run] section is required")
    kv = {}
    for lineno, tokens in run_rows:
        kv.update(_split_kv(tokens, sections.where(lineno)))
    for key in ("dt", "steps"):
        if key not in kv:
            raise ValidationError(f"{path}: [run] needs {key}=")
    try:
        return Scenario(
            network=network,
            initial=initial,
            dt=_parse_float(kv["dt"], f"{path}:[run]"),
            steps=_parse_int(kv["steps"], f"{path}:[run]"),
            order=_parse_int(kv.get("order", "2"), f"{path}:[run]"),
            record_every=_parse_int(kv.get("record_every", "1"), f"{path}:[run]"),
        )
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _diagram_line(name: str, diagram: FundamentalDiagram) -> str:
    if isinstance(diagram, GreenshieldsDiagram):
        return f"{name} greenshields rho_max={_fmt(diagram.rho_max)}"
    if isinstance(diagram, TabulatedDiagram):
        pts = ",".join(f"{_fmt(x)}:{_fmt(g)}" for x, g in diagram.points)
        return f"{name} tabulated rho_max={_fmt(diagram.rho_max)} points={pts}"
    raise ValidationError(f"cannot serialize diagram type {type(diagram).__name__}")


def _collect_diagrams(diagrams) -> dict[str, FundamentalDiagram]:
    named: dict[str, FundamentalDiagram] = {}
    for diagram in diagrams:
        if diagram not in named.values():
            named[f"fd{len(named) + 1}"] = diagram
    return named


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    """Write a scenario in canonical form; loading it back is an identity."""
    path = Path(path)
    net = scenario.network
    named = _collect_diagrams([ln.diagram for ln in net.links])

    def diagram_name(d: FundamentalDiagram) -> str:
        for name, known in named.items():
            if known == d:
                return name
        raise ValidationError("unknown diagram")  # pragma: no cover

    lines = [SCENARIO_HEADER, "", "[commodities]"]
    for name, w in zip(net.commodity_names, net.commodities.properties):
        lines.append(f"{name} {_fmt(w)}")
    lines += ["", "[diagrams]"]
    for name, diagram in named.items():
        lines.append(_diagram_line(name, diagram))
    lines += ["", "[links]"]
    for ln in net.links:
        lines.append(
            f"{ln.name} {ln.upstream} {ln.downstream} length={_fmt(ln.length)} "
            f"cells={ln.cells} diagram={diagram_name(ln.diagram)} "
            f"capacity={_fmt(ln.capacity)} priority={_fmt(ln.priority)}"
        )
    if net.splits:
        lines += ["", "[splits]"]
        for key in sorted(net.splits):
            node, in_name, out_name, cname = key
            lines.append(
                f"{node} {in_name} {out_name} {cname} {_profile_str(net.splits[key])}"
            )
    if net.restriction_entries:
        lines += ["", "[restrictions]"]
        for node, in_name, blocker, blocked, iv in net.restriction_entries:
            lines.append(
                f"{node} {in_name} {blocker} {blocked} {_fmt(iv.left)} {_fmt(iv.right)}"
            )
    if net.demand_profiles:
        lines += ["", "[demands]"]
        for key in sorted(net.demand_profiles):
            node, cname = key
            lines.append(f"{node} {cname} {_profile_str(net.demand_profiles[key])}")
    if net.supply_profiles:
        lines += ["", "[supplies]"]
        for node in sorted(net.supply_profiles):
            lines.append(f"{node} {_profile_str(net.supply_profiles[node])}")
    lines += ["", "[initial]"]
    for ln in net.links:
        rows = scenario.initial[ln.name]
        for k, cname in enumerate(net.commodity_names):
            column = [rows[cell][k] for cell in range(ln.cells)]
            if all(v == column[0] for v in column):
                if column[0] != 0.0:
                    lines.append(f"{ln.name} all {cname} {_fmt(column[0])}")
            else:
                for cell, v in enumerate(column, start=1):
                    if v != 0.0:
                        lines.append(f"{ln.name} {cell} {cname} {_fmt(v)}")
    lines += [
        "",
        "[run]",
        f"dt={_fmt(scenario.dt)} steps={scenario.steps} order={scenario.order} "
        f"record_every={scenario.record_every}",
        "",
    ]
    path.write_text("\n".join(lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# Node-problem files
# ---------------------------------------------------------------------------


def load_node_problem(
    path: str | Path, order: int | None = None
) -> tuple[NodeProblem1 | NodeProblem2, tuple[str, ...]]:
    """Parse a node-problem file.

    Returns the problem and the commodity names.  ``order`` overrides the
    file's declared order, provided the file carries the sections the
    requested order needs.
    """
    path = Path(path)
    sections = _Sections(path, NODE_HEADER)
    kv = {}
    for lineno, tokens in sections.rows("problem"):
        kv.update(_split_kv(tokens, sections.where(lineno)))
    for key in ("inputs", "outputs"):
        if key not in kv:
            raise ValidationError(f"{path}: [problem] needs {key}=")
    m = _parse_int(kv["inputs"], f"{path}:[problem]")
    n = _parse_int(kv["outputs"], f"{path}:[problem]")
    declared_order = _parse_int(kv.get("order", "1"), f"{path}:[problem]")
    time_scale = _parse_float(kv.get("time_scale", "1"), f"{path}:[problem]")
    if order is None:
        order = declared_order
    if order not in (1, 2):
        raise ValidationError(f"{path}: order must be 1 or 2, got {order}")

    commodities, commodity_names = _parse_commodities(sections)
    c = commodities.count
    cindex = {name: k for k, name in enumerate(commodity_names)}

    def commodity_of(token: str, where: str) -> int:
        if token not in cindex:
            raise ValidationError(f"{where}: unknown commodity {token!r}")
        return cindex[token]

    def link_index(token: str, limit: int, where: str) -> int:
        idx = _parse_int(token, where)
        if not 1 <= idx <= limit:
            raise ValidationError(f"{where}: index {idx} out of range 1..{limit}")
        return idx - 1

    demands = [[0.0] * c for _ in range(m)]
    for lineno, tokens in sections.rows("demands"):
        where = sections.where(lineno)
        if len(tokens) != 3:
            raise ValidationError(f"{where}: demand lines are 'input commodity value'")
        i = link_index(tokens[0], m, where)
        k = commodity_of(tokens[1], where)
        demands[i][k] = _parse_float(tokens[2], where)

    splits = [[[0.0] * c for _ in range(n)] for _ in range(m)]
    for lineno, tokens in sections.rows("splits"):
        where = sections.where(lineno)
        if len(tokens) != 4:
            raise ValidationError(f"{where}: split lines are 'input output commodity beta'")
        i = link_index(tokens[0], m, where)
        j = link_index(tokens[1], n, where)
        value = _parse_float(tokens[3], where)
        ks = range(c) if tokens[2] == "*" else [commodity_of(tokens[2], where)]
        for k in ks:
            splits[i][j][k] = value
    if n == 1 and not sections.rows("splits"):
        for i in range(m):
            for k in range(c):
                splits[i][0][k] = 1.0

    priorities = [0.0] * m
    for lineno, tokens in sections.rows("priorities"):
        where = sections.where(lineno)
        if len(tokens) != 2:
            raise ValidationError(f"{where}: priority lines are 'input value'")
        priorities[link_index(tokens[0], m, where)] = _parse_float(tokens[1], where)

    capacities = None
    cap_rows = sections.rows("capacities")
    if cap_rows:
        capacities = [0.0] * m
        for lineno, tokens in cap_rows:
            where = sections.where(lineno)
            if len(tokens) != 2:
                raise ValidationError(f"{where}: capacity lines are 'input value'")
            capacities[link_index(tokens[0], m, where)] = _parse_float(tokens[1], where)

    entries = {}
    for lineno, tokens in sections.rows("restrictions"):
        where = sections.where(lineno)
        if len(tokens) != 5:
            raise ValidationError(
                f"{where}: restriction lines are 'input blocker blocked y z'"
            )
        i = link_index(tokens[0], m, where)
        blocker = link_index(tokens[1], n, where)
        blocked = link_index(tokens[2], n, where)
        try:
            entries[(i, blocker, blocked)] = RestrictionInterval(
                _parse_float(tokens[3], where), _parse_float(tokens[4], where)
            )
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    restrictions = RestrictionMap(entries)

    try:
        if order == 1:
            supplies = [math.inf] * n
            rows = sections.rows("supplies")
            if not rows:
                raise ValidationError(f"{path}: order 1 needs a [supplies] section")
            for lineno, tokens in rows:
                where = sections.where(lineno)
                if len(tokens) != 2:
                    raise ValidationError(f"{where}: supply lines are 'output value'")
                supplies[link_index(tokens[0], n, where)] = _parse_float(tokens[1], where)
            problem: NodeProblem1 | NodeProblem2 = NodeProblem1(
                demands=demands,
                splits=splits,
                supplies=tuple(supplies),
                priorities=tuple(priorities),
                restrictions=restrictions,
                capacities=tuple(capacities) if capacities else None,
            )
        else:
            diagrams = _parse_diagrams(sections)
            down_meta: dict[int, dict[str, str]] = {}
            down_density = [[0.0] * c for _ in range(n)]
            rows = sections.rows("downstream")
            if not rows:
                raise ValidationError(f"{path}: order 2 needs a [downstream] section")
            for lineno, tokens in rows:
                where = sections.where(lineno)
                j = link_index(tokens[0], n, where)
                if len(tokens) >= 2 and tokens[1] == "density":
                    if len(tokens) != 4:
                        raise ValidationError(
                            f"{where}: density lines are 'output density commodity value'"
                        )
                    k = commodity_of(tokens[2], where)
                    down_density[j][k] = _parse_float(tokens[3], where)
                else:
                    down_meta.setdefault(j, {}).update(_split_kv(tokens[1:], where))
            downstream = []
            out_diagrams = []
            for j in range(n):
                meta = down_meta.get(j)
                if meta is None or "diagram" not in meta or "length" not in meta:
                    raise ValidationError(
                        f"{path}: downstream output {j + 1} needs 'diagram=' and 'length='"
                    )
                if meta["diagram"] not in diagrams:
                    raise ValidationError(
                        f"{path}: unknown diagram {meta['diagram']!r} for output {j + 1}"
                    )
                out_diagrams.append(diagrams[meta["diagram"]])
                downstream.append(
                    LinkState(
                        densities=tuple(down_density[j]),
                        length=_parse_float(meta["length"], f"{path}:[downstream]"),
                        commodities=commodities,
                    )
                )
            problem = NodeProblem2(
                demands=demands,
                splits=splits,
                priorities=tuple(priorities),
                commodities=commodities,
                downstream=tuple(downstream),
                diagrams=tuple(out_diagrams),
                restrictions=restrictions,
                capacities=tuple(capacities) if capacities else None,
                time_scale=time_scale,
            )
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return problem, commodity_names


def save_node_problem(
    problem: NodeProblem1 | NodeProblem2,
    path: str | Path,
    commodity_names: tuple[str, ...] | None = None,
) -> None:
    """Write a node problem in canonical form."""
    path = Path(path)
    second = isinstance(problem, NodeProblem2)
    m = problem.num_inputs
    n = problem.num_outputs
    c = problem.num_commodities
    if commodity_names is None:
        commodity_names = tuple(f"c{k + 1}" for k in range(c))
    if second:
        props = problem.commodities.properties
    else:
        props = tuple(1.0 for _ in range(c))  # placeholder values, order 1 ignores them

    lines = [NODE_HEADER, "", "[problem]"]
    extra = f" time_scale={_fmt(problem.time_scale)}" if second else ""
    lines.append(f"order={2 if second else 1} inputs={m} outputs={n}{extra}")
    lines += ["", "[commodities]"]
    for name, w in zip(commodity_names, props):
        lines.append(f"{name} {_fmt(w)}")
    lines += ["", "[demands]"]
    for i in range(m):
        for k in range(c):
            if problem.demands[i][k] != 0.0:
                lines.append(f"{i + 1} {commodity_names[k]} {_fmt(problem.demands[i][k])}")
    lines += ["", "[splits]"]
    for i in range(m):
        for j in range(n):
            for k in range(c):
                if problem.splits[i][j][k] != 0.0:
                    lines.append(
                        f"{i + 1} {j + 1} {commodity_names[k]} {_fmt(problem.splits[i][j][k])}"
                    )
    lines += ["", "[priorities]"]
    for i in range(m):
        lines.append(f"{i + 1} {_fmt(problem.priorities[i])}")
    if problem.capacities is not None:
        lines += ["", "[capacities]"]
        for i in range(m):
            lines.append(f"{i + 1} {_fmt(problem.capacities[i])}")
    if problem.restrictions.entries:
        lines += ["", "[restrictions]"]
        for (i, blocker, blocked), iv in problem.restrictions:
            lines.append(
                f"{i + 1} {blocker + 1} {blocked + 1} {_fmt(iv.left)} {_fmt(iv.right)}"
            )
    if second:
        named = _collect_diagrams(problem.diagrams)

        def diagram_name(d: FundamentalDiagram) -> str:
            for name, known in named.items():
                if known == d:
                    return name
            raise ValidationError("unknown diagram")  # pragma: no cover

        lines += ["", "[diagrams]"]
        for name, diagram in named.items():
            lines.append(_diagram_line(name, diagram))
        lines += ["", "[downstream]"]
        for j in range(n):
            state = problem.downstream[j]
            lines.append(
                f"{j + 1} diagram={diagram_name(problem.diagrams[j])} "
                f"length={_fmt(state.length)}"
            )
            for k in range(c):
                if state.densities[k] != 0.0:
                    lines.append(
                        f"{j + 1} density {commodity_names[k]} {_fmt(state.densities[k])}"
                    )
    else:
        lines += ["", "[supplies]"]
        for j in range(n):
            lines.append(f"{j + 1} {_fmt(problem.supplies[j])}")
    lines.append("")
    path.write_text("\n".join(lines), encoding="utf-8")


def load(path: str | Path):
    """Load either document type, dispatching on the header line."""
    path = Path(path)
    sections = _Sections(path)
    if sections.header == SCENARIO_HEADER:
        return load_scenario(path)
    if sections.header == NODE_HEADER:
        return load_node_problem(path)[0]
    raise ValidationError(f"{path}: unrecognized header {sections.header!r}")


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def read_table(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        rows = list(reader)
    if not rows:
        raise ValidationError(f"{path}: empty table")
    return rows[0], rows[1:]


def _set_str(values) -> str:
    return ";".join(str(v + 1) for v in sorted(values))


def _parse_set(token: str) -> frozenset[int]:
    if not token:
        return frozenset()
    return frozenset(int(v) - 1 for v in token.split(";"))


def _event_str(event: Event) -> str:
    return f"{event.kind}:{'-'.join(str(k + 1) for k in event.index)}:{_fmt(event.time)}"


def _parse_event(token: str) -> Event:
    kind, idx, t = token.split(":")
    return Event(
        kind=kind,
        index=tuple(int(v) - 1 for v in idx.split("-")),
        time=float(t),
    )


def write_node_solution(
    solution: NodeSolution | NodeSolution2,
    out_dir: str | Path,
    commodity_names: tuple[str, ...] | None = None,
) -> list[Path]:
    """Write flows, the event trace, per-iteration rates, and (second order)
    supply states and final densities as CSV tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    flows = np.asarray(solution.flows)
    m, n, c = flows.shape
    if commodity_names is None:
        commodity_names = tuple(f"c{k + 1}" for k in range(c))
    second = isinstance(solution, NodeSolution2)
    paths = []

    paths.append(
        _write_csv(
            out_dir / "flows.csv",
            ["in", "out", "commodity", "flow"],
            (
                [str(i + 1), str(j + 1), commodity_names[k], _fmt(flows[i, j, k])]
                for i in range(m)
                for j in range(n)
                for k in range(c)
            ),
        )
    )

    trace_rows = []
    rate_rows = []
    supply_rows = []
    for step in solution.trace:
        if second:
            remaining = ";".join(
                f"{j + 1}:{_fmt(view.supply)}"
                for j, view in enumerate(step.supplies)
                if view is not None
            )
        else:
            remaining = ""
        trace_rows.append(
            [
                str(step.k),
                _fmt(step.t),
                _fmt(step.dt),
                ";".join(_event_str(e) for e in step.events),
                _set_str(step.filled),
                _set_str(step.finished),
                remaining,
            ]
        )
        rates = np.asarray(step.rates)
        for i in range(m):
            for j in range(n):
                for k in range(c):
                    if rates[i, j, k] != 0.0:
                        rate_rows.append(
                            [
                                str(step.k),
                                str(i + 1),
                                str(j + 1),
                                commodity_names[k],
                                _fmt(rates[i, j, k]),
                            ]
                        )
        if second:
            for j, view in enumerate(step.supplies):
                if view is None:
                    continue
                supply_rows.append(
                    [
                        str(step.k),
                        str(j + 1),
                        _fmt(view.w_upstream),
                        _fmt(view.v_upstream),
                        _fmt(view.rho_upstream),
                        _fmt(view.supply),
                        "1" if view.fresh else "0",
                    ]
                )
    paths.append(
        _write_csv(
            out_dir / "trace.csv",
            ["k", "t", "dt", "events", "filled", "finished", "supplies"],
            trace_rows,
        )
    )
    paths.append(
        _write_csv(
            out_dir / "rates.csv",
            ["k", "in", "out", "commodity", "rate"],
            rate_rows,
        )
    )
    if second:
        paths.append(
            _write_csv(
                out_dir / "supplies.csv",
                ["k", "out", "w_upstream", "v_upstream", "rho_upstream", "supply", "fresh"],
                supply_rows,
            )
        )
        paths.append(
            _write_csv(
                out_dir / "final_densities.csv",
                ["out", "commodity", "density"],
                (
                    [str(j + 1), commodity_names[k], _fmt(solution.final_densities[j][k])]
                    for j in range(n)
                    for k in range(c)
                ),
            )
        )
    return paths


def read_node_solution(
    problem: NodeProblem1 | NodeProblem2,
    out_dir: str | Path,
    commodity_names: tuple[str, ...] | None = None,
) -> NodeSolution | NodeSolution2:
    """Rebuild a solution (flows plus trace) from its CSV tables."""
    out_dir = Path(out_dir)
    second = isinstance(problem, NodeProblem2)
    m, n, c = problem.num_inputs, problem.num_outputs, problem.num_commodities
    if commodity_names is None:
        commodity_names = tuple(f"k{k + 1}" for k in range(c))
    cindex = {name: k for k, name in enumerate(commodity_names)}

    flows = np.zeros((m, n, c))
    header, rows = read_table(out_dir / "flows.csv")
    for row in rows:
        flows[int(row[0]) - 1, int(row[1]) - 1, cindex[row[2]]] = float(row[3])

    rates_by_k: dict[int, np.ndarray] = {}
    _, rows = read_table(out_dir / "rates.csv")
    for row in rows:
        k = int(row[0])
        rates_by_k.setdefault(k, np.zeros((m, n, c)))[
            int(row[1]) - 1, int(row[2]) - 1, cindex[row[3]]
        ] = float(row[4])

    supplies_by_k: dict[int, dict[int, SupplyState]] = {}
    if second:
        _, rows = read_table(out_dir / "supplies.csv")
        for row in rows:
            supplies_by_k.setdefault(int(row[0]), {})[int(row[1]) - 1] = SupplyState(
                w_upstream=float(row[2]),
                v_upstream=float(row[3]),
                rho_upstream=float(row[4]),
                supply=float(row[5]),
                fresh=row[6] == "1",
            )

    trace = []
    final_time = 0.0
    _, rows = read_table(out_dir / "trace.csv")
    for row in rows:
        k = int(row[0])
        t = float(row[1])
        dt = float(row[2])
        final_time = max(final_time, t + dt)
        events = tuple(_parse_event(tok) for tok in row[3].split(";") if tok)
        common = dict(
            k=k,
            t=t,
            dt=dt,
            rates=rates_by_k.get(k, np.zeros((m, n, c))),
            filled=_parse_set(row[4]),
            finished=_parse_set(row[5]),
            events=events,
        )
        if second:
            views = supplies_by_k.get(k, {})
            trace.append(
                TraceStep2(
                    supplies=tuple(views.get(j) for j in range(n)),
                    **common,
                )
            )
        else:
            trace.append(TraceStep(**common))

    if not second:
        return NodeSolution(
            flows=flows, trace=tuple(trace), final_time=final_time, problem=problem
        )

    final_densities = [[0.0] * c for _ in range(n)]
    _, rows = read_table(out_dir / "final_densities.csv")
    for row in rows:
        final_densities[int(row[0]) - 1][cindex[row[1]]] = float(row[2])
    final_w = tuple(
        problem.commodities.mix(final_densities[j])
        if sum(final_densities[j]) > 0.0
        else None
        for j in range(n)
    )
    return NodeSolution2(
        flows=flows,
        trace=tuple(trace),
        final_time=final_time,
        final_densities=tuple(tuple(r) for r in final_densities),
        final_net_properties=final_w,
        problem=problem,
    )


def write_sim_output(output: SimOutput, out_dir: str | Path) -> list[Path]:
    """Write density, junction-flow, and conservation-ledger tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    def density_rows():
        for name in sorted(output.densities):
            stack = output.densities[name]
            for r, t in enumerate(output.times):
                for cell in range(stack.shape[1]):
                    for k, cname in enumerate(output.commodity_names):
                        yield [
                            _fmt(t),
                            name,
                            str(cell + 1),
                            cname,
                            _fmt(stack[r, cell, k]),
                        ]

    paths.append(
        _write_csv(
            out_dir / "densities.csv",
            ["t", "link", "cell", "commodity", "value"],
            density_rows(),
        )
    )
    paths.append(
        _write_csv(
            out_dir / "node_flows.csv",
            ["t", "node", "in", "out", "commodity", "flow"],
            (
                [_fmt(t), node, in_name, out_name, cname, _fmt(flow)]
                for t, node, in_name, out_name, cname, flow in output.node_flows
            ),
        )
    )
    paths.append(
        _write_csv(
            out_dir / "ledger.csv",
            ["t", "commodity", "entered", "exited", "stored"],
            (
                [_fmt(t), cname, _fmt(entered), _fmt(exited), _fmt(stored)]
                for t, cname, entered, exited, stored in output.ledger
            ),
        )
    )
    return paths
