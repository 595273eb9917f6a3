"""Operator-graph IR: loading, validation, shapes, and work accounting."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from kitsune import (
    CycleError,
    GraphError,
    OpClass,
    OperatorKind,
    ParseError,
    ShapeError,
    builtin_graph,
    load_graph,
    loads_graph,
    op_work,
    serialize_graph,
)
from kitsune.graph import classify, graph_from_dict, graph_work


def _doc(nodes, dtype_bytes=2):
    return {"dtype_bytes": dtype_bytes, "nodes": nodes}


def _linear(nid, m=None, k=None, n=1, inputs=(), **extra):
    attrs = {"N": n, **extra}
    if m is not None:
        attrs["M"] = m
    if k is not None:
        attrs["K"] = k
    return {"id": nid, "kind": "Linear", "attrs": attrs, "inputs": list(inputs)}


# ---------------------------------------------------------------------------
# loading and validation
# ---------------------------------------------------------------------------


def test_load_simple_chain(tmp_path):
    doc = _doc(
        [
            _linear("a", m=4, k=8, n=16),
            {"id": "b", "kind": "Elementwise", "attrs": {}, "inputs": ["a"]},
        ]
    )
    path = tmp_path / "g.json"
    path.write_text(json.dumps(doc))
    g = load_graph(str(path))
    assert g.order == ["a", "b"]
    assert g.nodes["b"].output_shape == (4, 16)
    assert g.entry_ids == ["a"]
    assert g.exit_ids == ["b"]


def test_parse_error_carries_line():
    with pytest.raises(ParseError) as exc:
        loads_graph('{"dtype_bytes": 2,\n "nodes": [}')
    assert exc.value.line == 2
    assert "line 2" in str(exc.value)


def test_unknown_input_reference():
    with pytest.raises(GraphError, match="unknown input 'ghost'"):
        graph_from_dict(_doc([_linear("a", m=2, k=2, n=2, inputs=["ghost"])]))


def test_duplicate_id_rejected():
    with pytest.raises(GraphError, match="duplicate node id"):
        graph_from_dict(_doc([_linear("a", m=2, k=2, n=2), _linear("a", m=2, k=2, n=2)]))


def test_cycle_detected_and_listed():
    doc = _doc(
        [
            {"id": "x", "kind": "Elementwise", "attrs": {}, "inputs": ["z"]},
            {"id": "y", "kind": "Elementwise", "attrs": {}, "inputs": ["x"]},
            {"id": "z", "kind": "Elementwise", "attrs": {}, "inputs": ["y"]},
        ]
    )
    with pytest.raises(CycleError) as exc:
        graph_from_dict(doc)
    assert set(exc.value.cycle) == {"x", "y", "z"}


def test_shape_mismatch_names_both_nodes():
    doc = _doc(
        [
            _linear("p", m=4, k=4, n=8),
            _linear("q", m=4, k=4, n=6),
            {"id": "r", "kind": "Reduce", "attrs": {}, "inputs": ["p", "q"]},
        ]
    )
    with pytest.raises(ShapeError) as exc:
        graph_from_dict(doc)
    msg = str(exc.value)
    assert "p" in msg and "q" in msg


def test_missing_attr_rejected():
    with pytest.raises(GraphError, match="missing required attr 'N'"):
        graph_from_dict(
            _doc([{"id": "a", "kind": "Linear", "attrs": {"M": 2, "K": 2}, "inputs": []}])
        )


def test_unknown_kind_rejected():
    with pytest.raises(GraphError, match="unknown kind"):
        graph_from_dict(_doc([{"id": "a", "kind": "Conv9D", "attrs": {}, "inputs": []}]))


def test_topo_order_is_declaration_stable():
    # two independent entries: declaration order breaks the tie
    doc = _doc(
        [
            _linear("b", m=2, k=2, n=2),
            _linear("a", m=2, k=2, n=2),
            {"id": "s", "kind": "Reduce", "attrs": {}, "inputs": ["a", "b"]},
        ]
    )
    g = graph_from_dict(doc)
    assert g.order == ["b", "a", "s"]


def test_round_trip_is_isomorphic():
    g = builtin_graph("nerf-chain")
    g2 = loads_graph(serialize_graph(g))
    assert g2.order == g.order
    assert g2.dtype_bytes == g.dtype_bytes
    for nid in g.nodes:
        assert g2.nodes[nid].kind == g.nodes[nid].kind
        assert g2.nodes[nid].inputs == g.nodes[nid].inputs
        assert g2.nodes[nid].output_shape == g.nodes[nid].output_shape


# ---------------------------------------------------------------------------
# shape inference
# ---------------------------------------------------------------------------


def test_linear_infers_from_input():
    g = graph_from_dict(_doc([_linear("a", m=32, k=16, n=64), _linear("b", n=8, inputs=["a"])]))
    b = g.nodes["b"]
    assert b.attrs["M"] == 32 and b.attrs["K"] == 64
    assert b.output_shape == (32, 8)


def test_linear_transpose_input():
    g = graph_from_dict(
        _doc([_linear("a", m=32, k=16, n=64), _linear("b", n=8, inputs=["a"], transpose_input=True)])
    )
    assert g.nodes["b"].attrs == {"N": 8, "transpose_input": True, "M": 64, "K": 32}
    assert g.nodes["b"].output_shape == (64, 8)


def test_linear_declared_dim_conflict():
    doc = _doc([_linear("a", m=32, k=16, n=64), _linear("b", m=99, n=8, inputs=["a"])])
    with pytest.raises(ShapeError, match="declared M=99"):
        graph_from_dict(doc)


def test_reduce_axis_drops_dimension():
    doc = _doc(
        [
            {"id": "e", "kind": "Elementwise", "attrs": {"shape": [4, 6, 8]}, "inputs": []},
            {"id": "r", "kind": "Reduce", "attrs": {"axis": 1}, "inputs": ["e"]},
        ]
    )
    g = graph_from_dict(doc)
    assert g.nodes["r"].output_shape == (4, 8)


def test_concat_with_dram_side_operand():
    doc = _doc(
        [
            _linear("a", m=16, k=4, n=8),
            {
                "id": "c",
                "kind": "Concat",
                "attrs": {"entry_shape": [16, 3], "axis": 1},
                "inputs": ["a"],
            },
        ]
    )
    g = graph_from_dict(doc)
    assert g.nodes["c"].output_shape == (16, 11)


def test_gather_shape():
    doc = _doc(
        [
            _linear("t", m=100, k=4, n=8),
            {"id": "g", "kind": "Gather", "attrs": {"count": 7}, "inputs": ["t"]},
        ]
    )
    g = graph_from_dict(doc)
    assert g.nodes["g"].output_shape == (7, 8)


def test_elementwise_broadcast():
    doc = _doc(
        [
            {"id": "a", "kind": "Elementwise", "attrs": {"shape": [4, 8]}, "inputs": []},
            {"id": "b", "kind": "Elementwise", "attrs": {"shape": [8]}, "inputs": []},
            {"id": "c", "kind": "Elementwise", "attrs": {}, "inputs": ["a", "b"]},
        ]
    )
    g = graph_from_dict(doc)
    assert g.nodes["c"].output_shape == (4, 8)


# ---------------------------------------------------------------------------
# work accounting (frozen oracle values)
# ---------------------------------------------------------------------------


def test_work_linear_unit():
    g = graph_from_dict(_doc([_linear("a", m=1, k=1, n=1)]))
    w = op_work(g.nodes["a"], 2)
    assert (w.flops, w.input_bytes, w.output_bytes) == (2, 4, 2)


def test_work_linear_mlp_layer():
    # 1024 x 256 -> 1024, fp16: 2*M*K*N flops, (M*K + K*N)*2 in, M*N*2 out
    g = graph_from_dict(_doc([_linear("a", m=1024, k=256, n=1024)]))
    w = op_work(g.nodes["a"], 2)
    assert w.flops == 536_870_912
    assert w.input_bytes == 1_048_576
    assert w.output_bytes == 2_097_152


def test_work_multi_input_reduce():
    doc = _doc(
        [_linear(f"p{i}", m=8, k=2, n=1024) for i in range(8)]
        + [{"id": "r", "kind": "Reduce", "attrs": {}, "inputs": [f"p{i}" for i in range(8)]}]
    )
    g = graph_from_dict(doc)
    w = op_work(g.nodes["r"], 2)
    assert w.flops == 7 * 8 * 1024  # (n_inputs - 1) adds per output element
    assert w.input_bytes == 8 * 8 * 1024 * 2
    assert w.output_bytes == 8 * 1024 * 2


def test_work_elementwise_and_unary():
    doc = _doc(
        [
            {"id": "e", "kind": "Elementwise", "attrs": {"shape": [64, 64]}, "inputs": []},
            {"id": "s", "kind": "Softmax", "attrs": {}, "inputs": ["e"]},
            {"id": "n", "kind": "LayerNorm", "attrs": {}, "inputs": ["s"]},
        ]
    )
    g = graph_from_dict(doc)
    assert op_work(g.nodes["e"], 2).flops == 4096
    assert op_work(g.nodes["s"], 2).flops == 4 * 4096
    assert op_work(g.nodes["n"], 2).flops == 8 * 4096
    assert op_work(g.nodes["s"], 2).input_bytes == 8192


def test_op_class_split():
    assert classify(OperatorKind.LINEAR) is OpClass.TENSOR
    for kind in OperatorKind:
        if kind is not OperatorKind.LINEAR:
            assert classify(kind) is OpClass.SIMT


@given(
    m=st.integers(min_value=1, max_value=64),
    k=st.integers(min_value=1, max_value=64),
    n=st.integers(min_value=1, max_value=64),
    dt=st.sampled_from([1, 2, 4]),
)
def test_work_linear_scaling_property(m, k, n, dt):
    g = graph_from_dict(_doc([_linear("a", m=m, k=k, n=n)], dtype_bytes=dt))
    w = op_work(g.nodes["a"], dt)
    assert w.flops == 2 * m * k * n
    assert w.input_bytes == (m * k + k * n) * dt
    assert w.output_bytes == m * n * dt


def test_graph_work_is_additive():
    g = builtin_graph("mlp-wide-hidden")
    total = graph_work(g)
    parts = [op_work(node, g.dtype_bytes) for node in g.topo_nodes()]
    assert total.flops == sum(p.flops for p in parts)
    assert total.input_bytes == sum(p.input_bytes for p in parts)
    assert total.output_bytes == sum(p.output_bytes for p in parts)


# ---------------------------------------------------------------------------
# built-in graphs
# ---------------------------------------------------------------------------


def test_builtin_mlp_shapes():
    g = builtin_graph("mlp-wide-hidden")
    assert [g.nodes[n].kind.value for n in g.order] == ["Linear", "Elementwise", "Linear"]
    assert g.nodes["fc1"].output_shape == (16384, 1024)
    assert g.nodes["fc2"].output_shape == (16384, 256)


def test_builtin_mlp_hidden_override():
    g = builtin_graph("mlp-wide-hidden", hidden=256, batch=1024)
    assert g.nodes["fc1"].output_shape == (1024, 256)


def test_builtin_splitk():
    g = builtin_graph("splitk-reduce")
    assert len(g.order) == 9
    assert g.nodes["sum"].output_shape == (1024, 1024)
    assert all(g.nodes[f"part{i}"].attrs["K"] == 256 for i in range(8))


def test_builtin_backprop_multicast():
    g = builtin_graph("backprop-multicast")
    assert g.consumers["dact"] == ["dgrad", "wgrad"]
    assert g.nodes["dgrad"].output_shape == (1024, 1024)
    assert g.nodes["wgrad"].output_shape == (1024, 1024)
    assert g.nodes["wgrad"].attrs["K"] == 1024


def test_builtin_nerf_chain():
    g = builtin_graph("nerf-chain")
    kinds = [g.nodes[n].kind for n in g.order]
    assert kinds.count(OperatorKind.LINEAR) == 8
    assert kinds.count(OperatorKind.ELEMENTWISE) == 7
    assert kinds.count(OperatorKind.CONCAT) == 1
    assert g.nodes["skip"].output_shape == (65536, 316)
    assert g.nodes["fc4"].attrs["K"] == 316
    assert g.nodes["fc7"].output_shape == (65536, 256)


def test_builtin_mgn_and_ffn():
    g = builtin_graph("mgn-mlp")
    assert [g.nodes[n].kind.value for n in g.order] == [
        "Linear", "Elementwise", "Linear", "Elementwise", "Linear", "LayerNorm",
    ]
    f = builtin_graph("transformer-ffn")
    assert f.nodes["up"].output_shape == (512, 4096)
    assert f.nodes["down"].output_shape == (512, 1024)


def test_builtin_unknown_name():
    with pytest.raises(GraphError, match="unknown builtin graph"):
        builtin_graph("resnet-50")


def test_builtin_bad_param():
    with pytest.raises(GraphError):
        builtin_graph("splitk-reduce", k=100, parts=3)
