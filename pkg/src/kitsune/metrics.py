"""Trace post-processing: utilization quadrants, speedup and traffic tables,
and machine-sensitivity sweeps.

Reports serialize to CSV (tables) and JSON (machine consumption).  Rows are
ordered by graph name, then mode, so repeated runs diff cleanly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

from kitsune.errors import MetricsError
from kitsune.graph import OperatorGraph, builtin_graph
from kitsune.machine import MachineConfig
from kitsune.sim import MODES, ExecTrace, run

LOW_UTIL_THRESHOLD = 1.0 / 3.0


def geomean(values: list[float]) -> float:
    if not values:
        raise MetricsError("geomean of an empty sequence")
    if any(v <= 0 for v in values):
        raise MetricsError("geomean requires positive values")
    return math.exp(sum(math.log(v) for v in values) / len(values))


def _fmt(x: float) -> str:
    # fixed-point keeps CSV output byte-identical across runs
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# utilization quadrants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UtilizationQuadrants:
    """Share of runtime spent in each SM-low x DRAM-low quadrant."""

    both_low: float
    low_sm: float  # SMs starved while DRAM stays busy
    low_dram: float  # DRAM idle while SMs stay busy
    neither_low: float
    threshold: float = LOW_UTIL_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "both_low": round(self.both_low, 6),
            "low_sm": round(self.low_sm, 6),
            "low_dram": round(self.low_dram, 6),
            "neither_low": round(self.neither_low, 6),
            "threshold": round(self.threshold, 6),
        }


def quadrants(trace: ExecTrace, threshold: float = LOW_UTIL_THRESHOLD) -> UtilizationQuadrants:
    """Classify each utilization sample as low/high on both axes.

    "Low" means below `threshold` of the respective peak; samples are
    equal-duration bins, so fractions are plain counts over the total.
    """

    if not trace.samples:
        raise MetricsError(f"trace for '{trace.graph_name}' carries no utilization samples")
    n = len(trace.samples)
    both = sm_only = dram_only = neither = 0
    for s in trace.samples:
        sm_low = s.sm_frac < threshold
        dram_low = s.dram_frac < threshold
        if sm_low and dram_low:
            both += 1
        elif sm_low:
            sm_only += 1
        elif dram_low:
            dram_only += 1
        else:
            neither += 1
    return UtilizationQuadrants(
        both_low=both / n,
        low_sm=sm_only / n,
        low_dram=dram_only / n,
        neither_low=neither / n,
        threshold=threshold,
    )


# ---------------------------------------------------------------------------
# speedup / traffic tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    graph: str
    mode: str
    time_us: float
    dram_bytes: int
    queue_l2_bytes: int
    speedup: float  # BSP runtime over this mode's runtime
    traffic_reduction: float  # 1 - dram_bytes / BSP dram_bytes

    def to_dict(self) -> dict:
        return {
            "graph": self.graph,
            "mode": self.mode,
            "time_us": round(self.time_us, 6),
            "dram_bytes": self.dram_bytes,
            "queue_l2_bytes": self.queue_l2_bytes,
            "speedup": round(self.speedup, 6),
            "traffic_reduction": round(self.traffic_reduction, 6),
        }


_REPORT_COLUMNS = (
    "graph",
    "mode",
    "time_us",
    "dram_bytes",
    "queue_l2_bytes",
    "speedup",
    "traffic_reduction",
)


@dataclass
class ExperimentReport:
    rows: list[ReportRow]
    geomean_speedup: dict[str, float]  # per mode, across graphs
    geomean_byte_ratio: dict[str, float]  # per mode: geomean of dram/dram_bsp

    def to_dict(self) -> dict:
        return {
            "rows": [r.to_dict() for r in self.rows],
            "geomean_speedup": {m: round(v, 6) for m, v in sorted(self.geomean_speedup.items())},
            "geomean_byte_ratio": {
                m: round(v, 6) for m, v in sorted(self.geomean_byte_ratio.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(_REPORT_COLUMNS)
        for r in self.rows:
            w.writerow(
                [
                    r.graph,
                    r.mode,
                    _fmt(r.time_us),
                    r.dram_bytes,
                    r.queue_l2_bytes,
                    _fmt(r.speedup),
                    _fmt(r.traffic_reduction),
                ]
            )
        for mode in sorted(self.geomean_speedup):
            w.writerow(
                [
                    "geomean",
                    mode,
                    "",
                    "",
                    "",
                    _fmt(self.geomean_speedup[mode]),
                    _fmt(1.0 - self.geomean_byte_ratio[mode]),
                ]
            )
        return out.getvalue()


def speedup_report(traces: dict[str, dict[str, ExecTrace]]) -> ExperimentReport:
    """Cross-mode comparison table; `traces` maps graph name -> mode -> trace."""

    rows: list[ReportRow] = []
    per_mode_speedups: dict[str, list[float]] = {}
    per_mode_ratios: dict[str, list[float]] = {}
    for graph in sorted(traces):
        by_mode = traces[graph]
        if "bsp" not in by_mode:
            raise MetricsError(f"missing BSP baseline for graph '{graph}'")
        base = by_mode["bsp"]
        if base.time_us <= 0 or base.dram_bytes <= 0:
            raise MetricsError(f"degenerate BSP baseline for graph '{graph}'")
        for mode in sorted(by_mode):
            t = by_mode[mode]
            ratio = t.dram_bytes / base.dram_bytes
            rows.append(
                ReportRow(
                    graph=graph,
                    mode=mode,
                    time_us=t.time_us,
                    dram_bytes=t.dram_bytes,
                    queue_l2_bytes=t.queue_l2_bytes,
                    speedup=base.time_us / t.time_us,
                    traffic_reduction=1.0 - ratio,
                )
            )
            per_mode_speedups.setdefault(mode, []).append(base.time_us / t.time_us)
            per_mode_ratios.setdefault(mode, []).append(ratio)
    return ExperimentReport(
        rows=rows,
        geomean_speedup={m: geomean(v) for m, v in per_mode_speedups.items()},
        geomean_byte_ratio={m: geomean(v) for m, v in per_mode_ratios.items()},
    )


@dataclass(frozen=True)
class TrafficRow:
    graph: str
    mode: str
    dram_bytes: int
    queue_l2_bytes: int
    intermediate_dram_bytes: int
    traffic_reduction: float

    def to_dict(self) -> dict:
        return {
            "graph": self.graph,
            "mode": self.mode,
            "dram_bytes": self.dram_bytes,
            "queue_l2_bytes": self.queue_l2_bytes,
            "intermediate_dram_bytes": self.intermediate_dram_bytes,
            "traffic_reduction": round(self.traffic_reduction, 6),
        }


@dataclass
class TrafficReport:
    rows: list[TrafficRow]

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(
            [
                "graph",
                "mode",
                "dram_bytes",
                "queue_l2_bytes",
                "intermediate_dram_bytes",
                "traffic_reduction",
            ]
        )
        for r in self.rows:
            w.writerow(
                [
                    r.graph,
                    r.mode,
                    r.dram_bytes,
                    r.queue_l2_bytes,
                    r.intermediate_dram_bytes,
                    _fmt(r.traffic_reduction),
                ]
            )
        return out.getvalue()


def traffic_report(traces: dict[str, dict[str, ExecTrace]]) -> TrafficReport:
    """Byte-exact DRAM/L2 totals per mode with reduction against BSP."""

    rows: list[TrafficRow] = []
    for graph in sorted(traces):
        by_mode = traces[graph]
        if "bsp" not in by_mode:
            raise MetricsError(f"missing BSP baseline for graph '{graph}'")
        base = by_mode["bsp"]
        for mode in sorted(by_mode):
            t = by_mode[mode]
            reduction = 1.0 - t.dram_bytes / base.dram_bytes if base.dram_bytes else 0.0
            rows.append(
                TrafficRow(
                    graph=graph,
                    mode=mode,
                    dram_bytes=t.dram_bytes,
                    queue_l2_bytes=t.queue_l2_bytes,
                    intermediate_dram_bytes=t.intermediate_dram_bytes,
                    traffic_reduction=reduction,
                )
            )
    return TrafficReport(rows=rows)


# ---------------------------------------------------------------------------
# machine sensitivity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    graph: str
    machine: str
    mode: str
    time_us: float
    self_speedup: float  # this mode's runtime at base over runtime at variant

    def to_dict(self) -> dict:
        return {
            "graph": self.graph,
            "machine": self.machine,
            "mode": self.mode,
            "time_us": round(self.time_us, 6),
            "self_speedup": round(self.self_speedup, 6),
        }


@dataclass
class SweepReport:
    base: str
    rows: list[SweepRow]
    geomean_self_speedup: dict[str, dict[str, float]]  # machine -> mode -> geomean

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "rows": [r.to_dict() for r in self.rows],
            "geomean_self_speedup": {
                machine: {m: round(v, 6) for m, v in sorted(modes.items())}
                for machine, modes in sorted(self.geomean_self_speedup.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["graph", "machine", "mode", "time_us", "self_speedup"])
        for r in self.rows:
            w.writerow([r.graph, r.machine, r.mode, _fmt(r.time_us), _fmt(r.self_speedup)])
        return out.getvalue()


def sensitivity_sweep(
    graphs: list[OperatorGraph | str],
    base: MachineConfig,
    variants: list[MachineConfig],
    modes: tuple[str, ...] = MODES,
) -> SweepReport:
    """Each mode's speedup over itself when the machine changes.

    Self-speedup isolates how well an execution style converts extra
    hardware into runtime, independent of how fast it was to begin with.
    """

    resolved = [builtin_graph(g) if isinstance(g, str) else g for g in graphs]
    names = [g.name for g in resolved]
    if len(set(names)) != len(names):
        raise MetricsError("sweep graphs must have unique names")

    base_times: dict[tuple[str, str], float] = {}
    for g in resolved:
        for mode in modes:
            base_times[(g.name, mode)] = run(g, mode, base).time_us

    rows: list[SweepRow] = []
    geo: dict[str, dict[str, float]] = {}
    for variant in variants:
        gains: dict[str, list[float]] = {}
        for g in sorted(resolved, key=lambda g: g.name):
            for mode in sorted(modes):
                t = run(g, mode, variant).time_us
                gain = base_times[(g.name, mode)] / t
                rows.append(
                    SweepRow(
                        graph=g.name,
                        machine=variant.name,
                        mode=mode,
                        time_us=t,
                        self_speedup=gain,
                    )
                )
                gains.setdefault(mode, []).append(gain)
        geo[variant.name] = {m: geomean(v) for m, v in gains.items()}
    return SweepReport(base=base.name, rows=rows, geomean_self_speedup=geo)
