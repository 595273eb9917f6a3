"""Kitsune: lower DL operator graphs into spatial dataflow pipelines and
simulate them on a cycle-approximate GPU model.

The toolchain has three compile steps (select -> pipeline -> balance) and a
simulator that runs the same graph in bulk-synchronous, vertically-fused, or
dataflow mode so the three can be compared on runtime, memory traffic, and
utilization.
"""

from kitsune.errors import (
    BalanceError,
    CycleError,
    GraphError,
    KitsuneError,
    MetricsError,
    ParseError,
    PatternError,
    PipelineError,
    ProtocolError,
    ShapeError,
)
from kitsune.graph import (
    BUILTIN_GRAPHS,
    OpClass,
    OperatorGraph,
    OperatorKind,
    OperatorNode,
    WorkEstimate,
    builtin_graph,
    load_graph,
    loads_graph,
    op_work,
    serialize_graph,
)

from kitsune.machine import MachineConfig, load_machine
from kitsune.sim import MODES, ExecTrace, run

__all__ = [
    "BUILTIN_GRAPHS",
    "BalanceError",
    "CycleError",
    "ExecTrace",
    "GraphError",
    "KitsuneError",
    "MODES",
    "MachineConfig",
    "MetricsError",
    "OpClass",
    "OperatorGraph",
    "OperatorKind",
    "OperatorNode",
    "ParseError",
    "PatternError",
    "PipelineError",
    "ProtocolError",
    "ShapeError",
    "WorkEstimate",
    "builtin_graph",
    "load_graph",
    "load_machine",
    "loads_graph",
    "op_work",
    "run",
    "serialize_graph",
]

__version__ = "0.1.0"
