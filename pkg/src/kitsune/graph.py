"""Operator-graph IR: typed DAG of tensor operators with shape inference.

A graph is a list of operator nodes declared in some order; edges are given
by each node naming its producers.  Loading a graph validates references,
rejects cycles, infers every tensor shape, and fixes a deterministic
topological order so that every later compile step is reproducible.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from enum import Enum

from kitsune.errors import CycleError, GraphError, ParseError, ShapeError


class OperatorKind(str, Enum):
    LINEAR = "Linear"
    ELEMENTWISE = "Elementwise"
    REDUCE = "Reduce"
    CONCAT = "Concat"
    GATHER = "Gather"
    SOFTMAX = "Softmax"
    LAYERNORM = "LayerNorm"


class OpClass(str, Enum):
    """Which execution pipe an operator occupies on an SM."""

    TENSOR = "TENSOR"
    SIMT = "SIMT"


def classify(kind: OperatorKind) -> OpClass:
    return OpClass.TENSOR if kind is OperatorKind.LINEAR else OpClass.SIMT


@dataclass
class OperatorNode:
    id: str
    kind: OperatorKind
    attrs: dict
    inputs: list[str]
    # Resolved during graph validation.
    input_shapes: list[tuple[int, ...]] = field(default_factory=list)
    output_shape: tuple[int, ...] = ()

    @property
    def op_class(self) -> OpClass:
        return classify(self.kind)


@dataclass
class WorkEstimate:
    """Arithmetic and DRAM-side byte cost of running one operator once."""

    flops: int
    input_bytes: int
    output_bytes: int

    def __add__(self, other: "WorkEstimate") -> "WorkEstimate":
        return WorkEstimate(
            self.flops + other.flops,
            self.input_bytes + other.input_bytes,
            self.output_bytes + other.output_bytes,
        )


@dataclass
class OperatorGraph:
    dtype_bytes: int
    nodes: dict[str, OperatorNode]  # declaration order preserved
    order: list[str]  # deterministic topological order
    consumers: dict[str, list[str]]  # producer id -> consumer ids, decl order
    name: str = ""

    def node(self, node_id: str) -> OperatorNode:
        return self.nodes[node_id]

    @property
    def entry_ids(self) -> list[str]:
        return [n for n in self.order if not self.nodes[n].inputs]

    @property
    def exit_ids(self) -> list[str]:
        return [n for n in self.order if not self.consumers[n]]

    def topo_nodes(self) -> list[OperatorNode]:
        return [self.nodes[n] for n in self.order]


# ---------------------------------------------------------------------------
# shape inference
# ---------------------------------------------------------------------------


def _require_attr(node: OperatorNode, key: str) -> object:
    if key not in node.attrs:
        raise GraphError(f"node '{node.id}' ({node.kind.value}) is missing required attr '{key}'")
    return node.attrs[key]


def _as_dim(node: OperatorNode, key: str, value: object) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        raise GraphError(f"node '{node.id}': attr '{key}' must be a positive integer, got {value!r}")
    return value


def _broadcast(node: OperatorNode, shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    rank = max(len(s) for s in shapes)
    out: list[int] = []
    for axis in range(rank):
        dims = {s[len(s) - rank + axis] for s in shapes if len(s) - rank + axis >= 0}
        dims.discard(1)
        if len(dims) > 1:
            raise ShapeError(
                f"node '{node.id}': inputs {[list(s) for s in shapes]} do not broadcast "
                f"(mismatch on axis {axis})"
            )
        out.append(dims.pop() if dims else 1)
    return tuple(out)


def _infer_linear(node: OperatorNode) -> tuple[int, ...]:
    n = _as_dim(node, "N", _require_attr(node, "N"))
    transpose = bool(node.attrs.get("transpose_input", False))
    if len(node.inputs) > 1:
        raise GraphError(f"node '{node.id}': Linear takes at most one input, got {len(node.inputs)}")
    if node.inputs:
        shape = node.input_shapes[0]
        if len(shape) != 2:
            raise ShapeError(f"node '{node.id}': Linear input must be 2-D, got {list(shape)}")
        m, k = (shape[1], shape[0]) if transpose else (shape[0], shape[1])
    else:
        m = _as_dim(node, "M", _require_attr(node, "M"))
        k = _as_dim(node, "K", _require_attr(node, "K"))
    for key, inferred in (("M", m), ("K", k)):
        if key in node.attrs and node.inputs:
            declared = _as_dim(node, key, node.attrs[key])
            if declared != inferred:
                raise ShapeError(
                    f"node '{node.id}': declared {key}={declared} but input "
                    f"'{node.inputs[0]}' implies {key}={inferred}"
                )
    node.attrs.setdefault("M", m)
    node.attrs.setdefault("K", k)
    return (m, n)


def _infer_elementwise(node: OperatorNode) -> tuple[int, ...]:
    if not node.inputs:
        raw = _require_attr(node, "shape")
        if not isinstance(raw, list) or not raw:
            raise GraphError(f"node '{node.id}': entry Elementwise attr 'shape' must be a non-empty list")
        return tuple(_as_dim(node, "shape", d) for d in raw)
    return _broadcast(node, node.input_shapes)


def _infer_reduce(node: OperatorNode) -> tuple[int, ...]:
    if len(node.inputs) >= 2:
        first = node.input_shapes[0]
        for other_id, shape in zip(node.inputs[1:], node.input_shapes[1:]):
            if shape != first:
                raise ShapeError(
                    f"node '{node.id}': summed inputs disagree, '{node.inputs[0]}' is "
                    f"{list(first)} but '{other_id}' is {list(shape)}"
                )
        return first
    if len(node.inputs) == 1:
        shape = node.input_shapes[0]
        axis = _require_attr(node, "axis")
        if not isinstance(axis, int) or not 0 <= axis < len(shape):
            raise GraphError(f"node '{node.id}': reduce axis {axis!r} out of range for {list(shape)}")
        return shape[:axis] + shape[axis + 1 :]
    raise GraphError(f"node '{node.id}': Reduce needs at least one input")


def _infer_concat(node: OperatorNode) -> tuple[int, ...]:
    operands = list(node.input_shapes)
    if "entry_shape" in node.attrs:
        raw = node.attrs["entry_shape"]
        if not isinstance(raw, list) or not raw:
            raise GraphError(f"node '{node.id}': attr 'entry_shape' must be a non-empty list")
        operands.append(tuple(_as_dim(node, "entry_shape", d) for d in raw))
    if len(operands) < 2:
        raise GraphError(f"node '{node.id}': Concat needs at least two operands")
    rank = len(operands[0])
    axis = node.attrs.get("axis", rank - 1)
    if not isinstance(axis, int) or not 0 <= axis < rank:
        raise GraphError(f"node '{node.id}': concat axis {axis!r} out of range")
    for shape in operands[1:]:
        if len(shape) != rank or any(shape[d] != operands[0][d] for d in range(rank) if d != axis):
            raise ShapeError(
                f"node '{node.id}': operands {[list(s) for s in operands]} may only differ on axis {axis}"
            )
    out = list(operands[0])
    out[axis] = sum(s[axis] for s in operands)
    return tuple(out)


def _infer_gather(node: OperatorNode) -> tuple[int, ...]:
    if len(node.inputs) != 1:
        raise GraphError(f"node '{node.id}': Gather takes exactly one input")
    shape = node.input_shapes[0]
    if len(shape) != 2:
        raise ShapeError(f"node '{node.id}': Gather input must be 2-D, got {list(shape)}")
    count = _as_dim(node, "count", _require_attr(node, "count"))
    return (count, shape[1])


def _infer_unary(node: OperatorNode) -> tuple[int, ...]:
    if len(node.inputs) != 1:
        raise GraphError(f"node '{node.id}': {node.kind.value} takes exactly one input")
    return node.input_shapes[0]


_INFER = {
    OperatorKind.LINEAR: _infer_linear,
    OperatorKind.ELEMENTWISE: _infer_elementwise,
    OperatorKind.REDUCE: _infer_reduce,
    OperatorKind.CONCAT: _infer_concat,
    OperatorKind.GATHER: _infer_gather,
    OperatorKind.SOFTMAX: _infer_unary,
    OperatorKind.LAYERNORM: _infer_unary,
}


# ---------------------------------------------------------------------------
# per-operator work accounting
# ---------------------------------------------------------------------------

# flops per output element for the streaming (non-GEMM, non-reduce) kinds;
# data-movement ops are charged half an op per element for address math.
_ELEMENT_FLOPS = {
    OperatorKind.ELEMENTWISE: 1.0,
    OperatorKind.CONCAT: 0.5,
    OperatorKind.GATHER: 0.5,
    OperatorKind.SOFTMAX: 4.0,
    OperatorKind.LAYERNORM: 8.0,
}

_GATHER_INDEX_BYTES = 4


def _elems(shape: tuple[int, ...]) -> int:
    return math.prod(shape)


def op_work(node: OperatorNode, dtype_bytes: int) -> WorkEstimate:
    """Flops plus DRAM bytes if the operator ran as a standalone kernel."""

    out_elems = _elems(node.output_shape)
    out_bytes = out_elems * dtype_bytes
    if node.kind is OperatorKind.LINEAR:
        m, n = node.output_shape
        k = node.attrs["K"]
        flops = 2 * m * k * n
        in_bytes = (m * k + k * n) * dtype_bytes
        return WorkEstimate(flops, in_bytes, out_bytes)
    if node.kind is OperatorKind.REDUCE:
        if len(node.inputs) >= 2:
            flops = (len(node.inputs) - 1) * out_elems
            in_bytes = sum(_elems(s) for s in node.input_shapes) * dtype_bytes
        else:
            axis_len = _elems(node.input_shapes[0]) // max(out_elems, 1)
            flops = max(axis_len - 1, 0) * out_elems
            in_bytes = _elems(node.input_shapes[0]) * dtype_bytes
        return WorkEstimate(flops, in_bytes, out_bytes)

    in_elems = sum(_elems(s) for s in node.input_shapes)
    if node.kind is OperatorKind.ELEMENTWISE and not node.inputs:
        in_elems = out_elems
    if node.kind is OperatorKind.CONCAT:
        in_elems = out_elems  # all operands together, including any DRAM-side one
    in_bytes = in_elems * dtype_bytes
    if node.kind is OperatorKind.GATHER:
        in_bytes = out_bytes + _elems(node.output_shape[:1]) * _GATHER_INDEX_BYTES
    flops = int(_ELEMENT_FLOPS[node.kind] * out_elems)
    return WorkEstimate(flops, in_bytes, out_bytes)


def graph_work(graph: OperatorGraph) -> WorkEstimate:
    total = WorkEstimate(0, 0, 0)
    for node in graph.topo_nodes():
        total = total + op_work(node, graph.dtype_bytes)
    return total


# ---------------------------------------------------------------------------
# loading / validation
# ---------------------------------------------------------------------------


def _topo_order(nodes: dict[str, OperatorNode], consumers: dict[str, list[str]]) -> list[str]:
    decl_index = {nid: i for i, nid in enumerate(nodes)}
    # indegree counts edge multiplicity; a node reading one producer twice
    # still becomes ready only after that producer finished once
    indegree = {nid: len(set(node.inputs)) for nid, node in nodes.items()}
    ready = [decl_index[nid] for nid, deg in indegree.items() if deg == 0]
    heapq.heapify(ready)
    decl_list = list(nodes)
    order: list[str] = []
    while ready:
        nid = decl_list[heapq.heappop(ready)]
        order.append(nid)
        for consumer in consumers[nid]:
            indegree[consumer] -= 1
            if indegree[consumer] == 0:
                heapq.heappush(ready, decl_index[consumer])
    if len(order) < len(nodes):
        raise CycleError(_find_cycle(nodes, set(order)))
    return order


def _find_cycle(nodes: dict[str, OperatorNode], done: set[str]) -> list[str]:
    remaining = [nid for nid in nodes if nid not in done]
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(nid: str) -> list[str] | None:
        color[nid] = 1
        stack.append(nid)
        for producer in nodes[nid].inputs:
            if producer in done or producer not in nodes:
                continue
            state = color.get(producer, 0)
            if state == 1:
                return stack[stack.index(producer) :]
            if state == 0:
                found = visit(producer)
                if found is not None:
                    return found
        stack.pop()
        color[nid] = 2
        return None

    for nid in remaining:
        if color.get(nid, 0) == 0:
            found = visit(nid)
            if found is not None:
                return found
    return remaining  # unreachable in practice


def graph_from_dict(data: object, name: str = "") -> OperatorGraph:
    if not isinstance(data, dict):
        raise GraphError("graph document must be a JSON object")
    dtype_bytes = data.get("dtype_bytes")
    if not isinstance(dtype_bytes, int) or isinstance(dtype_bytes, bool) or dtype_bytes <= 0:
        raise GraphError(f"'dtype_bytes' must be a positive integer, got {dtype_bytes!r}")
    raw_nodes = data.get("nodes")
    if not isinstance(raw_nodes, list):
        raise GraphError("'nodes' must be a list")

    nodes: dict[str, OperatorNode] = {}
    for i, raw in enumerate(raw_nodes):
        if not isinstance(raw, dict):
            raise GraphError(f"nodes[{i}] must be an object")
        nid = raw.get("id")
        if not isinstance(nid, str) or not nid:
            raise GraphError(f"nodes[{i}] has no valid 'id'")
        if nid in nodes:
            raise GraphError(f"duplicate node id '{nid}'")
        kind_raw = raw.get("kind")
        try:
            kind = OperatorKind(kind_raw)
        except ValueError:
            valid = ", ".join(k.value for k in OperatorKind)
            raise GraphError(f"node '{nid}': unknown kind {kind_raw!r} (expected one of {valid})")
        attrs = raw.get("attrs", {})
        if not isinstance(attrs, dict):
            raise GraphError(f"node '{nid}': 'attrs' must be an object")
        inputs = raw.get("inputs", [])
        if not isinstance(inputs, list) or not all(isinstance(x, str) for x in inputs):
            raise GraphError(f"node '{nid}': 'inputs' must be a list of node ids")
        nodes[nid] = OperatorNode(id=nid, kind=kind, attrs=dict(attrs), inputs=list(inputs))

    consumers: dict[str, list[str]] = {nid: [] for nid in nodes}
    for nid, node in nodes.items():
        for producer in node.inputs:
            if producer not in nodes:
                raise GraphError(f"node '{nid}' references unknown input '{producer}'")
            if producer == nid:
                raise CycleError([nid])
        for producer in dict.fromkeys(node.inputs):
            consumers[producer].append(nid)

    order = _topo_order(nodes, consumers)
    graph = OperatorGraph(
        dtype_bytes=dtype_bytes,
        nodes=nodes,
        order=order,
        consumers=consumers,
        name=str(data.get("name", name)),
    )
    for nid in order:
        node = nodes[nid]
        node.input_shapes = [nodes[p].output_shape for p in node.inputs]
        node.output_shape = _INFER[node.kind](node)
    return graph


def loads_graph(text: str, name: str = "") -> OperatorGraph:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno, column=exc.colno) from exc
    return graph_from_dict(data, name=name)


def load_graph(path: str) -> OperatorGraph:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return loads_graph(text)


def serialize_graph(graph: OperatorGraph) -> str:
    doc = {
        "dtype_bytes": graph.dtype_bytes,
        "nodes": [
            {
                "id": node.id,
                "kind": node.kind.value,
                "attrs": node.attrs,
                "inputs": node.inputs,
            }
            for node in graph.nodes.values()
        ],
    }
    if graph.name:
        doc["name"] = graph.name
    return json.dumps(doc, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# built-in benchmark graphs
# ---------------------------------------------------------------------------


def _mlp_wide_hidden(batch: int = 16384, in_features: int = 256, hidden: int = 1024) -> dict:
    return {
        "dtype_bytes": 2,
        "name": "mlp-wide-hidden",
        "nodes": [
            {"id": "fc1", "kind": "Linear", "attrs": {"M": batch, "K": in_features, "N": hidden}, "inputs": []},
            {"id": "act", "kind": "Elementwise", "attrs": {"op": "relu"}, "inputs": ["fc1"]},
            {"id": "fc2", "kind": "Linear", "attrs": {"N": in_features}, "inputs": ["act"]},
        ],
    }


def _splitk_reduce(m: int = 1024, n: int = 1024, k: int = 2048, parts: int = 8) -> dict:
    if k % parts != 0:
        raise GraphError(f"splitk-reduce: k={k} not divisible by parts={parts}")
    nodes = [
        {
            "id": f"part{i}",
            "kind": "Linear",
            "attrs": {"M": m, "K": k // parts, "N": n},
            "inputs": [],
        }
        for i in range(parts)
    ]
    nodes.append(
        {"id": "sum", "kind": "Reduce", "attrs": {}, "inputs": [f"part{i}" for i in range(parts)]}
    )
    return {"dtype_bytes": 2, "name": "splitk-reduce", "nodes": nodes}


def _backprop_multicast(batch: int = 1024, hidden: int = 1024) -> dict:
    # One upstream gradient feeds both the data-gradient GEMM and the
    # weight-gradient GEMM (which reads it transposed).
    return {
        "dtype_bytes": 2,
        "name": "backprop-multicast",
        "nodes": [
            {"id": "dact", "kind": "Elementwise", "attrs": {"shape": [batch, hidden], "op": "relu-bwd"}, "inputs": []},
            {"id": "dgrad", "kind": "Linear", "attrs": {"N": hidden}, "inputs": ["dact"]},
            {"id": "wgrad", "kind": "Linear", "attrs": {"N": hidden, "transpose_input": True}, "inputs": ["dact"]},
        ],
    }


def _nerf_chain(
    batch: int = 65536,
    hidden: int = 256,
    depth: int = 8,
    skip_layer: int = 4,
    in_features: int = 60,
) -> dict:
    if not 0 < skip_layer < depth:
        raise GraphError(f"nerf-chain: skip_layer={skip_layer} must fall inside 1..{depth - 1}")
    nodes: list[dict] = [
        {"id": "fc0", "kind": "Linear", "attrs": {"M": batch, "K": in_features, "N": hidden}, "inputs": []}
    ]
    prev = "fc0"
    for layer in range(1, depth):
        act = f"act{layer - 1}"
        nodes.append({"id": act, "kind": "Elementwise", "attrs": {"op": "relu"}, "inputs": [prev]})
        prev = act
        if layer == skip_layer:
            nodes.append(
                {
                    "id": "skip",
                    "kind": "Concat",
                    "attrs": {"entry_shape": [batch, in_features], "axis": 1},
                    "inputs": [prev],
                }
            )
            prev = "skip"
        nodes.append({"id": f"fc{layer}", "kind": "Linear", "attrs": {"N": hidden}, "inputs": [prev]})
        prev = f"fc{layer}"
    return {"dtype_bytes": 2, "name": "nerf-chain", "nodes": nodes}


def _mgn_mlp(batch: int = 4096, width: int = 128) -> dict:
    return {
        "dtype_bytes": 2,
        "name": "mgn-mlp",
        "nodes": [
            {"id": "fc0", "kind": "Linear", "attrs": {"M": batch, "K": width, "N": width}, "inputs": []},
            {"id": "act0", "kind": "Elementwise", "attrs": {"op": "relu"}, "inputs": ["fc0"]},
            {"id": "fc1", "kind": "Linear", "attrs": {"N": width}, "inputs": ["act0"]},
            {"id": "act1", "kind": "Elementwise", "attrs": {"op": "relu"}, "inputs": ["fc1"]},
            {"id": "fc2", "kind": "Linear", "attrs": {"N": width}, "inputs": ["act1"]},
            {"id": "norm", "kind": "LayerNorm", "attrs": {}, "inputs": ["fc2"]},
        ],
    }


def _transformer_ffn(batch: int = 512, d_model: int = 1024, d_ff: int = 4096) -> dict:
    return {
        "dtype_bytes": 2,
        "name": "transformer-ffn",
        "nodes": [
            {"id": "up", "kind": "Linear", "attrs": {"M": batch, "K": d_model, "N": d_ff}, "inputs": []},
            {"id": "gelu", "kind": "Elementwise", "attrs": {"op": "gelu"}, "inputs": ["up"]},
            {"id": "down", "kind": "Linear", "attrs": {"N": d_model}, "inputs": ["gelu"]},
        ],
    }


BUILTIN_GRAPHS = {
    "mlp-wide-hidden": _mlp_wide_hidden,
    "splitk-reduce": _splitk_reduce,
    "backprop-multicast": _backprop_multicast,
    "nerf-chain": _nerf_chain,
    "mgn-mlp": _mgn_mlp,
    "transformer-ffn": _transformer_ffn,
}


def builtin_graph(name: str, **params: int) -> OperatorGraph:
    if name not in BUILTIN_GRAPHS:
        known = ", ".join(sorted(BUILTIN_GRAPHS))
        raise GraphError(f"unknown builtin graph '{name}' (expected one of {known})")
    try:
        doc = BUILTIN_GRAPHS[name](**params)
    except TypeError as exc:
        raise GraphError(f"builtin graph '{name}': {exc}") from exc
    return graph_from_dict(doc)
