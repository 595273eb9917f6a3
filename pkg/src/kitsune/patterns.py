"""Pattern-driven selection of fusable subgraphs (sf-nodes).

Patterns are sequences of operator kinds with grouping, alternation inside
groups, and Kleene star, e.g. ``chain: Linear (Elementwise Linear)*``.  The
selector walks the graph's deterministic topological order, trying patterns
in library order at each position (earlier patterns win), taking the longest
match whose members form a connected subgraph.  Because every match is a
contiguous window of the topological order, a match can never be re-entered
by a path that leaves it, so windows only need a connectivity check.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from kitsune.errors import PatternError
from kitsune.graph import OperatorGraph, OperatorKind

_KIND_LETTER = {
    OperatorKind.LINEAR: "L",
    OperatorKind.ELEMENTWISE: "E",
    OperatorKind.REDUCE: "R",
    OperatorKind.CONCAT: "C",
    OperatorKind.GATHER: "G",
    OperatorKind.SOFTMAX: "S",
    OperatorKind.LAYERNORM: "N",
}
_NAME_TO_KIND = {k.value: k for k in OperatorKind}

DEFAULT_DENY = frozenset({OperatorKind.GATHER})

# Shipped pattern library.  Order is priority: the fan-in and multicast
# shapes must be tried before the generic chain or they would be shadowed.
DEFAULT_LIBRARY_TEXT = """\
# fan-in of partial GEMMs summed into one tensor
splitk-reduce: Linear (Linear)* Reduce
# one upstream gradient feeding both the data- and weight-gradient GEMMs
grad-multicast: Elementwise Linear Linear
# GEMM chain with activations, optional skip concat, optional trailing norm
gemm-chain: Linear (Elementwise Linear | Elementwise Concat Linear)* (LayerNorm)*
"""


@dataclass
class Pattern:
    name: str
    source: str
    regex: re.Pattern = field(repr=False)


def compile_pattern(name: str, source: str, line: int | None = None) -> Pattern:
    tokens = re.findall(r"[A-Za-z]+|\(|\)|\*|\||\S", source)
    if not tokens:
        raise PatternError(f"pattern '{name}': empty pattern")
    out: list[str] = []
    depth = 0
    prev = ""
    for tok in tokens:
        if tok == "(":
            depth += 1
            out.append("(?:")
        elif tok == ")":
            depth -= 1
            if depth < 0:
                raise PatternError(f"pattern '{name}': unbalanced ')'")
            if prev in {"(", "|"}:
                raise PatternError(f"pattern '{name}': empty group")
            out.append(")")
        elif tok == "*":
            if prev != ")":
                raise PatternError(f"pattern '{name}': '*' must follow a group")
            out.append("*")
        elif tok == "|":
            if depth == 0:
                raise PatternError(f"pattern '{name}': alternation only allowed inside a group")
            if prev in {"", "(", "|"}:
                raise PatternError(f"pattern '{name}': empty alternative")
            out.append("|")
        elif tok in _NAME_TO_KIND:
            out.append(_KIND_LETTER[_NAME_TO_KIND[tok]])
        else:
            loc = f" (line {line})" if line is not None else ""
            raise PatternError(f"pattern '{name}': unknown token {tok!r}{loc}")
        prev = tok
    if depth != 0:
        raise PatternError(f"pattern '{name}': unbalanced '('")
    return Pattern(name=name, source=source.strip(), regex=re.compile("".join(out)))


def parse_patterns(text: str) -> list[Pattern]:
    patterns: list[Pattern] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if ":" not in stripped:
            raise PatternError(f"line {lineno}: expected 'name: KIND KIND ...', got {stripped!r}")
        name, _, body = stripped.partition(":")
        name = name.strip()
        if not name:
            raise PatternError(f"line {lineno}: pattern name missing")
        if name in seen:
            raise PatternError(f"line {lineno}: duplicate pattern name '{name}'")
        seen.add(name)
        patterns.append(compile_pattern(name, body, line=lineno))
    if not patterns:
        raise PatternError("pattern library is empty")
    return patterns


def load_patterns(path: str) -> list[Pattern]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_patterns(fh.read())


def default_library() -> list[Pattern]:
    return parse_patterns(DEFAULT_LIBRARY_TEXT)


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------


@dataclass
class SfNode:
    """A selected contiguous subgraph that will become one spatial pipeline."""

    id: str
    pattern: str
    members: list[str]  # in topological order
    boundary_in: list[tuple[str, str]]  # (outside producer, member consumer)
    boundary_out: list[tuple[str, str]]  # (member producer, outside consumer)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "pattern": self.pattern,
            "members": list(self.members),
            "boundary_in": [list(e) for e in self.boundary_in],
            "boundary_out": [list(e) for e in self.boundary_out],
        }


@dataclass
class Selection:
    graph_name: str
    sf_nodes: list[SfNode]
    coverage: float

    def to_dict(self) -> dict:
        return {
            "graph": self.graph_name,
            "coverage": self.coverage,
            "sf_nodes": [sf.to_dict() for sf in self.sf_nodes],
        }

    @staticmethod
    def from_dict(data: dict) -> "Selection":
        sf_nodes = [
            SfNode(
                id=raw["id"],
                pattern=raw.get("pattern", ""),
                members=list(raw["members"]),
                boundary_in=[tuple(e) for e in raw.get("boundary_in", [])],
                boundary_out=[tuple(e) for e in raw.get("boundary_out", [])],
            )
            for raw in data["sf_nodes"]
        ]
        return Selection(data.get("graph", ""), sf_nodes, float(data.get("coverage", 0.0)))


def _is_connected(graph: OperatorGraph, members: list[str]) -> bool:
    if len(members) <= 1:
        return True
    member_set = set(members)
    seen = {members[0]}
    frontier = [members[0]]
    while frontier:
        nid = frontier.pop()
        node = graph.nodes[nid]
        for neighbor in list(node.inputs) + graph.consumers[nid]:
            if neighbor in member_set and neighbor not in seen:
                seen.add(neighbor)
                frontier.append(neighbor)
    return len(seen) == len(member_set)


def _boundaries(graph: OperatorGraph, members: list[str]) -> tuple[list, list]:
    member_set = set(members)
    b_in: list[tuple[str, str]] = []
    b_out: list[tuple[str, str]] = []
    for nid in members:
        for producer in graph.nodes[nid].inputs:
            if producer not in member_set:
                b_in.append((producer, nid))
        for consumer in graph.consumers[nid]:
            if consumer not in member_set:
                b_out.append((nid, consumer))
    return b_in, b_out


def select(
    graph: OperatorGraph,
    library: list[Pattern] | None = None,
    deny: frozenset[OperatorKind] = DEFAULT_DENY,
) -> Selection:
    """Greedy left-to-right selection over the topological order."""

    patterns = library if library is not None else default_library()
    order = graph.order
    if not order:
        return Selection(graph.name, [], 1.0)

    # nodes of denied kinds split the sequence into independently-matched runs
    segments: list[list[str]] = [[]]
    for nid in order:
        if graph.nodes[nid].kind in deny:
            if segments[-1]:
                segments.append([])
        else:
            segments[-1].append(nid)

    sf_nodes: list[SfNode] = []
    covered = 0
    for segment in segments:
        encoded = "".join(_KIND_LETTER[graph.nodes[nid].kind] for nid in segment)
        pos = 0
        while pos < len(segment):
            taken = None
            for pattern in patterns:
                match = pattern.regex.match(encoded, pos)
                if match is None or match.end() == pos:
                    continue
                # longest match first; back off until the window is a
                # connected subgraph and still a complete pattern match
                for cut in range(match.end(), pos, -1):
                    if pattern.regex.fullmatch(encoded, pos, cut) is None:
                        continue
                    members = segment[pos:cut]
                    if _is_connected(graph, members):
                        taken = (pattern, members)
                        break
                if taken:
                    break
            if taken is None:
                pos += 1
                continue
            pattern, members = taken
            b_in, b_out = _boundaries(graph, members)
            sf_nodes.append(
                SfNode(
                    id=f"sf{len(sf_nodes)}",
                    pattern=pattern.name,
                    members=members,
                    boundary_in=b_in,
                    boundary_out=b_out,
                )
            )
            covered += len(members)
            pos += len(members)

    coverage = covered / len(order)
    return Selection(graph.name, sf_nodes, coverage)
