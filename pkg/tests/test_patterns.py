"""Selector: pattern parsing, greedy matching, contiguity, coverage."""

from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from kitsune import PatternError, builtin_graph
from kitsune.graph import OperatorKind, graph_from_dict
from kitsune.patterns import (
    Selection,
    compile_pattern,
    default_library,
    parse_patterns,
    select,
)


def _ew(nid, inputs=(), shape=None):
    attrs = {"shape": shape} if shape else {}
    return {"id": nid, "kind": "Elementwise", "attrs": attrs, "inputs": list(inputs)}


def _lin(nid, inputs=(), **attrs):
    return {"id": nid, "kind": "Linear", "attrs": attrs, "inputs": list(inputs)}


# ---------------------------------------------------------------------------
# pattern syntax
# ---------------------------------------------------------------------------


def test_compile_plain_sequence():
    p = compile_pattern("mlp3", "Linear Elementwise Linear")
    assert p.regex.fullmatch("LEL")
    assert not p.regex.fullmatch("LE")


def test_compile_star_group():
    p = compile_pattern("chain", "Linear (Elementwise Linear)*")
    for s in ("L", "LEL", "LELEL"):
        assert p.regex.fullmatch(s), s
    assert not p.regex.fullmatch("LE")


def test_compile_alternation():
    p = compile_pattern("alt", "Linear (Elementwise | Softmax) Linear")
    assert p.regex.fullmatch("LEL")
    assert p.regex.fullmatch("LSL")
    assert not p.regex.fullmatch("LRL")


@pytest.mark.parametrize(
    "source",
    [
        "Linear (Elementwise Linear",  # unbalanced (
        "Linear Elementwise) ",  # unbalanced )
        "Linear * ",  # star without group
        "Linear | Elementwise",  # top-level alternation
        "Linear (|) Linear",  # empty alternative
        "Linear Conv2D",  # unknown kind
        "",  # empty
    ],
)
def test_compile_rejects_bad_syntax(source):
    with pytest.raises(PatternError):
        compile_pattern("bad", source)


def test_parse_library_lines_and_comments():
    lib = parse_patterns("# header\n\nmlp3: Linear Elementwise Linear\nsingle: Reduce\n")
    assert [p.name for p in lib] == ["mlp3", "single"]


def test_parse_library_errors():
    with pytest.raises(PatternError, match="line 1"):
        parse_patterns("not a pattern line")
    with pytest.raises(PatternError, match="duplicate"):
        parse_patterns("a: Linear\na: Reduce\n")
    with pytest.raises(PatternError, match="empty"):
        parse_patterns("# only comments\n")


# ---------------------------------------------------------------------------
# selection on the builtin graphs
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "name,expected_sf,expected_pattern",
    [
        ("mlp-wide-hidden", 1, "gemm-chain"),
        ("splitk-reduce", 1, "splitk-reduce"),
        ("backprop-multicast", 1, "grad-multicast"),
        ("nerf-chain", 1, "gemm-chain"),
        ("mgn-mlp", 1, "gemm-chain"),
        ("transformer-ffn", 1, "gemm-chain"),
    ],
)
def test_default_library_fully_covers_builtins(name, expected_sf, expected_pattern):
    g = builtin_graph(name)
    sel = select(g)
    assert sel.coverage == 1.0
    assert len(sel.sf_nodes) == expected_sf
    assert sel.sf_nodes[0].pattern == expected_pattern
    assert sel.sf_nodes[0].members == g.order


def test_members_listed_in_topological_order():
    g = builtin_graph("nerf-chain")
    sel = select(g)
    members = sel.sf_nodes[0].members
    pos = {nid: i for i, nid in enumerate(g.order)}
    assert members == sorted(members, key=pos.__getitem__)


def test_gather_is_never_a_member():
    doc = {
        "dtype_bytes": 2,
        "nodes": [
            _lin("a", M=64, K=8, N=8),
            {"id": "g", "kind": "Gather", "attrs": {"count": 16}, "inputs": ["a"]},
            _lin("b", N=4, inputs=["g"]),
            _ew("e", inputs=["b"]),
            _lin("c", N=4, inputs=["e"]),
        ],
    }
    g = graph_from_dict(doc)
    sel = select(g)
    all_members = {m for sf in sel.sf_nodes for m in sf.members}
    assert "g" not in all_members
    assert sel.coverage == pytest.approx(4 / 5)
    # the run after the denied node is matched as its own chain
    assert any(sf.members == ["b", "e", "c"] for sf in sel.sf_nodes)


def test_boundary_edges_point_across_the_cut():
    doc = {
        "dtype_bytes": 2,
        "nodes": [
            _lin("a", M=64, K=8, N=8),
            {"id": "g", "kind": "Gather", "attrs": {"count": 16}, "inputs": ["a"]},
            _lin("b", N=4, inputs=["g"]),
        ],
    }
    sel = select(graph_from_dict(doc))
    by_member = {sf.members[0]: sf for sf in sel.sf_nodes}
    assert by_member["a"].boundary_out == [("a", "g")]
    assert by_member["a"].boundary_in == []
    assert by_member["b"].boundary_in == [("g", "b")]


def test_library_order_is_priority():
    g = builtin_graph("mlp-wide-hidden")
    lib = parse_patterns("first: Linear Elementwise\nsecond: Linear Elementwise Linear\n")
    sel = select(g, library=lib)
    # 'first' wins at position 0 even though 'second' would match more
    assert sel.sf_nodes[0].pattern == "first"
    assert sel.sf_nodes[0].members == ["fc1", "act"]


def test_greedy_longest_match_within_a_pattern():
    g = builtin_graph("nerf-chain")
    lib = parse_patterns("chain: Linear (Elementwise Linear | Elementwise Concat Linear)*\n")
    sel = select(g, library=lib)
    assert len(sel.sf_nodes) == 1
    assert len(sel.sf_nodes[0].members) == len(g.order)


def test_disconnected_window_is_rejected():
    # topo order interleaves two unrelated chains: b, a, e(b), c(e);
    # the token window [a, e, c] matches 'Linear Elementwise Linear' but is
    # not a connected subgraph, so the match must back off to just [a]
    doc = {
        "dtype_bytes": 2,
        "nodes": [
            _lin("b", M=4, K=4, N=4),
            _lin("a", M=4, K=4, N=4),
            _ew("e", inputs=["b"]),
            _lin("c", N=4, inputs=["e"]),
        ],
    }
    g = graph_from_dict(doc)
    assert g.order == ["b", "a", "e", "c"]
    sel = select(g)
    for sf in sel.sf_nodes:
        assert not ({"a", "e"} <= set(sf.members))
        assert not ({"a", "c"} <= set(sf.members))


def test_empty_graph_coverage_is_one():
    g = graph_from_dict({"dtype_bytes": 2, "nodes": []})
    sel = select(g)
    assert sel.coverage == 1.0
    assert sel.sf_nodes == []


def test_custom_deny_list():
    g = builtin_graph("splitk-reduce")
    sel = select(g, deny=frozenset({OperatorKind.REDUCE, OperatorKind.GATHER}))
    all_members = {m for sf in sel.sf_nodes for m in sf.members}
    assert "sum" not in all_members


def test_selection_round_trips_through_json():
    sel = select(builtin_graph("nerf-chain"))
    back = Selection.from_dict(sel.to_dict())
    assert back.coverage == sel.coverage
    assert [sf.members for sf in back.sf_nodes] == [sf.members for sf in sel.sf_nodes]
    assert back.sf_nodes[0].boundary_in == sel.sf_nodes[0].boundary_in


def test_sf_nodes_are_disjoint():
    for name in ("nerf-chain", "splitk-reduce", "mgn-mlp"):
        sel = select(builtin_graph(name))
        seen: set[str] = set()
        for sf in sel.sf_nodes:
            assert not (seen & set(sf.members))
            seen |= set(sf.members)


# ---------------------------------------------------------------------------
# contiguity property on random DAGs
# ---------------------------------------------------------------------------


def _convexity_violated(graph, members: set[str]) -> bool:
    # a path that leaves the member set must never re-enter it
    for start in members:
        frontier = [c for c in graph.consumers[start] if c not in members]
        seen = set(frontier)
        while frontier:
            nid = frontier.pop()
            if nid in members:
                return True
            for nxt in graph.consumers[nid]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        if seen & members:
            return True
    return False


@st.composite
def _random_ew_dag(draw):
    n = draw(st.integers(min_value=1, max_value=9))
    nodes = []
    for i in range(n):
        if i == 0:
            nodes.append(_ew(f"n{i}", shape=[4, 4]))
            continue
        k = draw(st.integers(min_value=0, max_value=min(i, 2)))
        inputs = draw(
            st.lists(
                st.integers(min_value=0, max_value=i - 1), min_size=k, max_size=k, unique=True
            )
        )
        if inputs:
            nodes.append(_ew(f"n{i}", inputs=[f"n{j}" for j in sorted(inputs)]))
        else:
            nodes.append(_ew(f"n{i}", shape=[4, 4]))
    return {"dtype_bytes": 2, "nodes": nodes}


@given(doc=_random_ew_dag())
@settings(max_examples=120, deadline=None)
def test_matches_are_connected_and_convex(doc):
    g = graph_from_dict(doc)
    lib = parse_patterns("runs: Elementwise (Elementwise)*\n")
    sel = select(g, library=lib)
    for sf in sel.sf_nodes:
        members = set(sf.members)
        assert not _convexity_violated(g, members), sf.members
        # connectivity: BFS over undirected member edges reaches everything
        seen = {sf.members[0]}
        frontier = [sf.members[0]]
        while frontier:
            nid = frontier.pop()
            for nb in list(g.nodes[nid].inputs) + g.consumers[nid]:
                if nb in members and nb not in seen:
                    seen.add(nb)
                    frontier.append(nb)
        assert seen == members
