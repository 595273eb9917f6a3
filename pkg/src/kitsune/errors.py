"""Exception hierarchy shared by all kitsune components."""

from __future__ import annotations


class KitsuneError(Exception):
    """Base class for all toolchain errors."""


class GraphError(KitsuneError):
    """Invalid operator graph (structure, references, attributes)."""


class ParseError(GraphError):
    """Malformed input text.  Carries a line/column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + loc)
        self.line = line
        self.column = column


class ShapeError(GraphError):
    """Tensor shapes disagree along an edge."""


class CycleError(GraphError):
    """The operator graph is not a DAG."""

    def __init__(self, cycle: list[str]):
        super().__init__("graph contains a cycle: " + " -> ".join(cycle + cycle[:1]))
        self.cycle = cycle


class PatternError(KitsuneError):
    """Bad pattern syntax or an unmatchable pattern library."""


class PipelineError(KitsuneError):
    """Pipeline construction failed (tiling, queue wiring, stage splitting)."""


class BalanceError(KitsuneError):
    """CTA allocation is infeasible for the machine at hand."""


class ProtocolError(KitsuneError):
    """Queue protocol misuse (bad sequence, double release, wrong caller)."""


class MetricsError(KitsuneError):
    """A report was asked of a trace that cannot support it."""
