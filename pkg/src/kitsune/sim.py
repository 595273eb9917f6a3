"""Cycle-approximate execution of an operator graph in three modes.

- ``bsp``: one kernel per operator, a device-wide barrier between kernels,
  every intermediate tensor round-trips DRAM.  Kernel time is the max of its
  compute time and its memory time (modern GPUs overlap the two streams).
- ``vertical``: operators fused per selected subgraph into one kernel whose
  CTAs each own a row block and run the member ops as serial phases.
  Single-consumer elementwise ops ride in registers; other intermediates
  stage in shared memory and spill to DRAM (round-trip traffic plus exposed
  latency) when the peak live footprint exceeds the per-SM budget.  A fused
  kernel that models out slower than its unfused members falls back to BSP.
- ``dataflow``: stages of each pipeline run concurrently on disjoint SM
  partitions, exchanging tiles through L2-resident ring queues.  This mode
  is simulated event-by-event: per-stage reader/compute/writer units overlap
  like double-buffered hardware loops, bandwidth is fluid-shared max-min per
  channel, and blocked stages wake on the queue poll interval.

All byte counters are exact integers; only times are floating point.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

from kitsune.balance import solve_allocation
from kitsune.errors import KitsuneError
from kitsune.graph import OpClass, OperatorGraph, OperatorKind, op_work
from kitsune.machine import GB, MachineConfig
from kitsune.patterns import Selection, select
from kitsune.pipeline import PipelineConfig, PipelineSpec, build_pipeline
from kitsune import queue_model
from kitsune.queue_model import Blocked, RingQueue

MODES = ("bsp", "vertical", "dataflow")

BSP_TILE_ROWS = 128  # GEMM macro-tile edge used by one-kernel-per-op launches
BSP_TILE_COLS = 128
SIMT_CTA_ELEMS = 65536  # elementwise-style kernels assign this many elements per CTA
FRAGMENT_ROWS = 16  # tensor-core fragment height; row tiles pad up to a multiple
HOP_ATOMICS = queue_model.HOP_ATOMICS  # sequence atomics per queue hop

# vertical fusion only: kinds that never join a fused row-block kernel
VERTICAL_DENY = frozenset({OperatorKind.REDUCE, OperatorKind.GATHER})


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _pad_rows_factor(rows: int) -> float:
    """Tensor-core fragments quantize the row dimension; short row tiles
    waste the padded fraction of the pipe."""

    padded = _ceil_div(rows, FRAGMENT_ROWS) * FRAGMENT_ROWS
    return padded / rows


# ---------------------------------------------------------------------------
# trace containers
# ---------------------------------------------------------------------------


@dataclass
class TraceEvent:
    t_us: float
    kind: str  # dispatch | compute | transfer | stall | spill | fence | barrier | done
    actor: str
    dur_us: float = 0.0
    bytes: int = 0
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "t_us": round(self.t_us, 6),
            "kind": self.kind,
            "actor": self.actor,
            "dur_us": round(self.dur_us, 6),
            "bytes": self.bytes,
            "detail": self.detail,
        }

    @staticmethod
    def from_dict(d: dict) -> "TraceEvent":
        return TraceEvent(
            t_us=d["t_us"],
            kind=d["kind"],
            actor=d["actor"],
            dur_us=d.get("dur_us", 0.0),
            bytes=d.get("bytes", 0),
            detail=d.get("detail", ""),
        )


@dataclass
class UtilSample:
    t_us: float
    sm_frac: float
    dram_frac: float

    def to_dict(self) -> dict:
        return {
            "t_us": round(self.t_us, 6),
            "sm_frac": round(self.sm_frac, 6),
            "dram_frac": round(self.dram_frac, 6),
        }

    @staticmethod
    def from_dict(d: dict) -> "UtilSample":
        return UtilSample(t_us=d["t_us"], sm_frac=d["sm_frac"], dram_frac=d["dram_frac"])


@dataclass
class ExecTrace:
    graph_name: str
    mode: str
    machine_name: str
    time_us: float
    cycles: int
    dram_bytes: int
    queue_l2_bytes: int
    intermediate_dram_bytes: int
    flops: dict[str, int]  # per pipe class: "tensor" / "simt"
    counters: dict
    meta: dict
    events: list[TraceEvent] = field(default_factory=list)
    samples: list[UtilSample] = field(default_factory=list)

    @property
    def time_s(self) -> float:
        return self.time_us * 1e-6

    def to_dict(self) -> dict:
        return {
            "graph": self.graph_name,
            "mode": self.mode,
            "machine": self.machine_name,
            "time_us": round(self.time_us, 6),
            "cycles": self.cycles,
            "dram_bytes": self.dram_bytes,
            "queue_l2_bytes": self.queue_l2_bytes,
            "intermediate_dram_bytes": self.intermediate_dram_bytes,
            "flops": dict(self.flops),
            "counters": self.counters,
            "meta": self.meta,
            "events": [e.to_dict() for e in self.events],
            "samples": [s.to_dict() for s in self.samples],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "ExecTrace":
        return ExecTrace(
            graph_name=d["graph"],
            mode=d["mode"],
            machine_name=d["machine"],
            time_us=d["time_us"],
            cycles=d["cycles"],
            dram_bytes=d["dram_bytes"],
            queue_l2_bytes=d["queue_l2_bytes"],
            intermediate_dram_bytes=d["intermediate_dram_bytes"],
            flops=dict(d["flops"]),
            counters=d.get("counters", {}),
            meta=d.get("meta", {}),
            events=[TraceEvent.from_dict(e) for e in d.get("events", [])],
            samples=[UtilSample.from_dict(s) for s in d.get("samples", [])],
        )

    @staticmethod
    def loads(text: str) -> "ExecTrace":
        return ExecTrace.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# utilization sampling
# ---------------------------------------------------------------------------


class _UtilAccum:
    """Collects SM-busy intervals and DRAM transfer segments, then bins them
    into fixed-width utilization samples."""

    BIN_S = 1e-6

    def __init__(self, machine: MachineConfig):
        self.machine = machine
        self._sm: dict[int, list[tuple[float, float]]] = {}
        self._dram: list[tuple[float, float, int]] = []

    def add_sm(self, t0: float, t1: float, sm_ids) -> None:
        if t1 <= t0:
            return
        for sm in sm_ids:
            self._sm.setdefault(sm, []).append((t0, t1))

    def add_dram(self, t0: float, t1: float, nbytes: int) -> None:
        if t1 > t0 and nbytes > 0:
            self._dram.append((t0, t1, nbytes))

    @staticmethod
    def _merge(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
        merged: list[tuple[float, float]] = []
        for s, e in sorted(intervals):
            if merged and s <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], e))
            else:
                merged.append((s, e))
        return merged

    def finalize(self, total_s: float) -> tuple[list[UtilSample], float, float]:
        if total_s <= 0:
            return [], 0.0, 0.0
        n_bins = max(1, math.ceil(total_s / self.BIN_S - 1e-9))
        sm_bins = [0.0] * n_bins
        dram_bins = [0.0] * n_bins
        busy_total = 0.0
        for intervals in self._sm.values():
            for s, e in self._merge(intervals):
                e = min(e, total_s)
                if e <= s:
                    continue
                busy_total += e - s
                lo = min(int(s / self.BIN_S), n_bins - 1)
                hi = min(int(e / self.BIN_S - 1e-12), n_bins - 1)
                for b in range(lo, hi + 1):
                    b0, b1 = b * self.BIN_S, (b + 1) * self.BIN_S
                    sm_bins[b] += max(0.0, min(e, b1) - max(s, b0))
        bytes_total = 0
        for s, e, nbytes in self._dram:
            e = min(e, total_s)
            if e <= s:
                continue
            bytes_total += nbytes
            rate = nbytes / (e - s)
            lo = min(int(s / self.BIN_S), n_bins - 1)
            hi = min(int(e / self.BIN_S - 1e-12), n_bins - 1)
            for b in range(lo, hi + 1):
                b0, b1 = b * self.BIN_S, (b + 1) * self.BIN_S
                dram_bins[b] += rate * max(0.0, min(e, b1) - max(s, b0))
        peak = self.machine.dram_gbps * GB
        samples = []
        for b in range(n_bins):
            width = min(total_s, (b + 1) * self.BIN_S) - b * self.BIN_S
            if width <= 0:
                continue
            samples.append(
                UtilSample(
                    t_us=b * self.BIN_S * 1e6,
                    sm_frac=min(1.0, sm_bins[b] / (self.machine.sm_count * width)),
                    dram_frac=min(1.0, dram_bins[b] / (peak * width)),
                )
            )
        sm_avg = busy_total / (self.machine.sm_count * total_s)
        dram_avg = bytes_total / (peak * total_s)
        return samples, min(1.0, sm_avg), min(1.0, dram_avg)


# ---------------------------------------------------------------------------
# shared per-node accounting
# ---------------------------------------------------------------------------


def _tensor_bytes(graph: OperatorGraph, nid: str) -> int:
    return math.prod(graph.nodes[nid].output_shape) * graph.dtype_bytes


def _node_stream_in_bytes(graph: OperatorGraph, nid: str, inside: set[str]) -> int:
    """DRAM-side reads a node performs when producers in `inside` are
    delivered on-chip: weights, entry operands, and boundary tensors."""

    node = graph.nodes[nid]
    dtype = graph.dtype_bytes
    total = 0
    if node.kind is OperatorKind.LINEAR:
        k, n = node.attrs["K"], node.attrs["N"]
        total += k * n * dtype
        if not node.inputs:
            total += node.attrs["M"] * k * dtype
    if node.kind is OperatorKind.CONCAT and "entry_shape" in node.attrs:
        total += math.prod(node.attrs["entry_shape"]) * dtype
    if node.kind is OperatorKind.GATHER:
        total += op_work(node, dtype).input_bytes
    for producer in node.inputs:
        if producer not in inside:
            total += _tensor_bytes(graph, producer)
    if not node.inputs and node.kind not in (OperatorKind.LINEAR,):
        total += op_work(node, dtype).input_bytes
    return total


def _graph_flops_by_class(graph: OperatorGraph) -> dict[str, int]:
    flops = {"tensor": 0, "simt": 0}
    for nid in graph.order:
        node = graph.nodes[nid]
        key = "tensor" if node.op_class is OpClass.TENSOR else "simt"
        flops[key] += op_work(node, graph.dtype_bytes).flops
    return flops


def _kernel_cta_count(graph: OperatorGraph, nid: str, sm_count: int) -> int:
    node = graph.nodes[nid]
    if node.kind is OperatorKind.LINEAR:
        ctas = _ceil_div(node.attrs["M"], BSP_TILE_ROWS) * _ceil_div(
            node.attrs["N"], BSP_TILE_COLS
        )
        if ctas < sm_count:
            # small GEMMs drop to 64x64 macro-tiles to fill the machine,
            # mirroring library tile-size heuristics
            ctas = _ceil_div(node.attrs["M"], 64) * _ceil_div(node.attrs["N"], 64)
        return ctas
    return max(1, _ceil_div(math.prod(node.output_shape), SIMT_CTA_ELEMS))


@dataclass
class _KernelModel:
    nid: str
    op_class: OpClass
    ctas: int
    t_compute_s: float
    t_mem_s: float
    bytes_total: int
    intermediate_bytes: int
    flops: int

    @property
    def time_s(self) -> float:
        return max(self.t_compute_s, self.t_mem_s)


def _bsp_kernel(graph: OperatorGraph, nid: str, machine: MachineConfig) -> _KernelModel:
    node = graph.nodes[nid]
    work = op_work(node, graph.dtype_bytes)
    ctas = _kernel_cta_count(graph, nid, machine.sm_count)
    active = min(ctas, machine.sm_count)
    rate = active * machine.pipe_flops_per_sm_s(node.op_class)
    nbytes = work.input_bytes + work.output_bytes
    inter = sum(_tensor_bytes(graph, p) for p in node.inputs)
    if graph.consumers[nid]:
        inter += work.output_bytes
    return _KernelModel(
        nid=nid,
        op_class=node.op_class,
        ctas=ctas,
        t_compute_s=work.flops / rate,
        t_mem_s=nbytes / (machine.dram_gbps * GB),
        bytes_total=nbytes,
        intermediate_bytes=inter,
        flops=work.flops,
    )


# ---------------------------------------------------------------------------
# BSP mode
# ---------------------------------------------------------------------------


def run_bsp(graph: OperatorGraph, machine: MachineConfig | None = None) -> ExecTrace:
    machine = machine or MachineConfig()
    util = _UtilAccum(machine)
    events: list[TraceEvent] = []
    t = 0.0
    dram = inter = 0
    for nid in graph.order:
        k = _bsp_kernel(graph, nid, machine)
        T = k.time_s
        events.append(TraceEvent(t * 1e6, "dispatch", nid, detail=f"{k.ctas} ctas"))
        events.append(TraceEvent(t * 1e6, "compute", nid, dur_us=k.t_compute_s * 1e6))
        events.append(
            TraceEvent(t * 1e6, "transfer", nid, dur_us=k.t_mem_s * 1e6, bytes=k.bytes_total)
        )
        util.add_sm(t, t + k.t_compute_s, range(min(k.ctas, machine.sm_count)))
        util.add_dram(t, t + T, k.bytes_total)
        t += T
        events.append(TraceEvent(t * 1e6, "barrier", nid))
        dram += k.bytes_total
        inter += k.intermediate_bytes
    samples, sm_avg, dram_avg = util.finalize(t)
    return ExecTrace(
        graph_name=graph.name,
        mode="bsp",
        machine_name=machine.name,
        time_us=t * 1e6,
        cycles=round(t * machine.clock_hz),
        dram_bytes=dram,
        queue_l2_bytes=0,
        intermediate_dram_bytes=inter,
        flops=_graph_flops_by_class(graph),
        counters={
            "kernels": len(graph.order),
            "utilization": {"sm_avg": round(sm_avg, 6), "dram_avg": round(dram_avg, 6)},
        },
        meta={"coverage": 0.0},
        events=events,
        samples=samples,
    )


# ---------------------------------------------------------------------------
# item ordering shared by vertical and dataflow coverage walks
# ---------------------------------------------------------------------------


def _order_items(graph: OperatorGraph, items: list[list[str]]) -> list[int]:
    """Topologically order coarse items (each a list of member node ids)."""

    pos = {nid: i for i, nid in enumerate(graph.order)}
    item_of: dict[str, int] = {}
    for idx, members in enumerate(items):
        for nid in members:
            item_of[nid] = idx
    indeg = [0] * len(items)
    succs: list[set[int]] = [set() for _ in items]
    for idx, members in enumerate(items):
        for nid in members:
            for producer in graph.nodes[nid].inputs:
                src = item_of.get(producer)
                if src is not None and src != idx and idx not in succs[src]:
                    succs[src].add(idx)
                    indeg[idx] += 1
    heap = [(pos[items[i][0]], i) for i in range(len(items)) if indeg[i] == 0]
    heapq.heapify(heap)
    out: list[int] = []
    while heap:
        _, idx = heapq.heappop(heap)
        out.append(idx)
        for nxt in sorted(succs[idx]):
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(heap, (pos[items[nxt][0]], nxt))
    if len(out) != len(items):
        raise KitsuneError("internal: coarse item graph has a cycle")
    return out


# ---------------------------------------------------------------------------
# vertical fusion mode
# ---------------------------------------------------------------------------


def _connected_runs(graph: OperatorGraph, members: list[str]) -> list[list[str]]:
    """Split a member list into weakly-connected components, topo order kept."""

    member_set = set(members)
    adj: dict[str, set[str]] = {nid: set() for nid in members}
    for nid in members:
        for producer in graph.nodes[nid].inputs:
            if producer in member_set:
                adj[nid].add(producer)
                adj[producer].add(nid)
    seen: set[str] = set()
    comps: list[list[str]] = []
    for nid in members:
        if nid in seen:
            continue
        stack, comp = [nid], set()
        while stack:
            cur = stack.pop()
            if cur in comp:
                continue
            comp.add(cur)
            stack.extend(adj[cur] - comp)
        seen |= comp
        comps.append([m for m in members if m in comp])
    return comps


@dataclass
class _FusedPlan:
    members: list[str]
    phases: list[list[str]]  # each phase: primary + register epilogues
    tile_m: int
    n_ctas: int
    staged: dict[str, tuple[int, int, int]]  # tensor -> (producer phase, last consumer phase, tile bytes)
    spilled: list[str]
    phase_stats: list[dict]  # per phase: t_compute_s, bytes, flops
    time_s: float
    bytes_total: int
    intermediate_bytes: int
    spill_round_trip_bytes: int


def _plan_fused_group(
    graph: OperatorGraph, members: list[str], machine: MachineConfig
) -> _FusedPlan:
    dtype = graph.dtype_bytes
    member_set = set(members)
    from kitsune.pipeline import _epilogue_groups  # same register-fusion rule

    phases = _epilogue_groups(graph, members)
    phase_of: dict[str, int] = {}
    for i, group in enumerate(phases):
        for nid in group:
            phase_of[nid] = i
    tails = {i: group[-1] for i, group in enumerate(phases)}

    lead = graph.nodes[members[0]].output_shape[0]
    tile_m = max(1, _ceil_div(lead, machine.sm_count))
    n_ctas = _ceil_div(lead, tile_m)

    # staged tensors: phase outputs consumed by a later phase (register
    # epilogues were already folded into their producer phase)
    staged: dict[str, tuple[int, int, int]] = {}
    for i, group in enumerate(phases):
        tensor = tails[i]
        consumer_phases = [
            phase_of[c]
            for c in graph.consumers[tensor]
            if c in member_set and phase_of[c] != i
        ]
        if not consumer_phases:
            continue
        cols = math.prod(graph.nodes[tensor].output_shape[1:]) or 1
        staged[tensor] = (i, max(consumer_phases), tile_m * cols * dtype)

    # spill until the peak live footprint fits shared memory
    spilled: list[str] = []
    live_bytes = dict(staged)
    while True:
        peak = 0
        for p in range(len(phases)):
            peak = max(
                peak,
                sum(tb for (p0, p1, tb) in live_bytes.values() if p0 <= p <= p1),
            )
        if peak <= machine.smem_per_sm_bytes or not live_bytes:
            break
        victim = max(live_bytes, key=lambda t: (live_bytes[t][2], -staged[t][0]))
        spilled.append(victim)
        del live_bytes[victim]

    spilled_set = set(spilled)
    dram_bw = machine.dram_gbps * GB
    stats: list[dict] = []
    bytes_total = 0
    inter_bytes = 0
    spill_rt = 0
    time_s = 0.0
    for i, group in enumerate(phases):
        primary = graph.nodes[group[0]]
        nbytes = 0
        flops = 0
        # on-chip inputs from spilled tensors re-read from DRAM
        for nid in group:
            node = graph.nodes[nid]
            nbytes += _node_stream_in_bytes(graph, nid, member_set)
            inter_bytes += sum(
                _tensor_bytes(graph, p) for p in node.inputs if p not in member_set
            )
            for producer in node.inputs:
                if producer in member_set and producer in spilled_set and phase_of[producer] != i:
                    rb = _tensor_bytes(graph, producer)
                    nbytes += rb
                    inter_bytes += rb
                    spill_rt += rb
        # outputs: spilled staging writes, plus exits leaving the group
        tensor = tails[i]
        out_bytes = _tensor_bytes(graph, tensor)
        outside = [c for c in graph.consumers[tensor] if c not in member_set]
        tail_hits_dram = True
        if outside or not graph.consumers[tensor]:
            nbytes += out_bytes
            if outside:
                inter_bytes += out_bytes
        elif tensor in spilled_set:
            nbytes += out_bytes
            inter_bytes += out_bytes
            spill_rt += out_bytes
        else:
            tail_hits_dram = False
        # saved activations: checkpoint unless this phase wrote them anyway
        for nid in group:
            if graph.nodes[nid].attrs.get("save") and not (nid == tensor and tail_hits_dram):
                nbytes += _tensor_bytes(graph, nid)

        prim_work = op_work(primary, dtype)
        t_comp = 0.0
        if primary.op_class is OpClass.TENSOR:
            factor = _pad_rows_factor(tile_m)
            t_comp += prim_work.flops * factor / (n_ctas * machine.pipe_flops_per_sm_s(OpClass.TENSOR))
        else:
            t_comp += prim_work.flops / (n_ctas * machine.pipe_flops_per_sm_s(OpClass.SIMT))
        flops += prim_work.flops
        for nid in group[1:]:
            w = op_work(graph.nodes[nid], dtype)
            t_comp += w.flops / (n_ctas * machine.pipe_flops_per_sm_s(OpClass.SIMT))
            flops += w.flops
        t_mem = nbytes / dram_bw
        stats.append(
            {"t_compute_s": t_comp, "t_mem_s": t_mem, "bytes": nbytes, "flops": flops}
        )
        bytes_total += nbytes
        time_s += max(t_comp, t_mem)

    # phase-boundary fences flush staged state; spilled tensors expose one
    # DRAM round-trip latency to their first consumer
    time_s += (len(phases) - 1) * machine.dram_latency_s
    time_s += len(spilled) * machine.dram_latency_s

    return _FusedPlan(
        members=members,
        phases=phases,
        tile_m=tile_m,
        n_ctas=n_ctas,
        staged=staged,
        spilled=spilled,
        phase_stats=stats,
        time_s=time_s,
        bytes_total=bytes_total,
        intermediate_bytes=inter_bytes,
        spill_round_trip_bytes=spill_rt,
    )


def run_vertical(
    graph: OperatorGraph,
    machine: MachineConfig | None = None,
    selection: Selection | None = None,
) -> ExecTrace:
    machine = machine or MachineConfig()
    selection = selection or select(graph)

    covered: set[str] = set()
    candidates: list[list[str]] = []
    for sf in selection.sf_nodes:
        keep = [nid for nid in sf.members if graph.nodes[nid].kind not in VERTICAL_DENY]
        runs: list[list[str]] = [[]]
        kept = set(keep)
        for nid in sf.members:
            if nid in kept:
                runs[-1].append(nid)
            elif runs[-1]:
                runs.append([])
        for run_members in runs:
            for comp in _connected_runs(graph, run_members):
                if len(comp) >= 2:
                    candidates.append(comp)
                    covered |= set(comp)

    items: list[list[str]] = list(candidates)
    fused_idx = set(range(len(candidates)))
    for nid in graph.order:
        if nid not in covered:
            items.append([nid])

    util = _UtilAccum(machine)
    events: list[TraceEvent] = []
    t = 0.0
    dram = inter = 0
    spill_count = 0
    spill_rt_bytes = 0
    fused_kernels = 0
    fallbacks = 0
    for idx in _order_items(graph, items):
        members = items[idx]
        if idx in fused_idx:
            plan = _plan_fused_group(graph, members, machine)
            bsp_models = [_bsp_kernel(graph, nid, machine) for nid in members]
            bsp_time = sum(k.time_s for k in bsp_models)
            if plan.time_s > bsp_time:
                # fusion would lose; the compiler keeps the unfused kernels
                fallbacks += 1
                for k in bsp_models:
                    T = k.time_s
                    events.append(TraceEvent(t * 1e6, "dispatch", k.nid, detail="fallback"))
                    events.append(TraceEvent(t * 1e6, "compute", k.nid, dur_us=k.t_compute_s * 1e6))
                    events.append(
                        TraceEvent(t * 1e6, "transfer", k.nid, dur_us=k.t_mem_s * 1e6, bytes=k.bytes_total)
                    )
                    util.add_sm(t, t + k.t_compute_s, range(min(k.ctas, machine.sm_count)))
                    util.add_dram(t, t + T, k.bytes_total)
                    t += T
                    events.append(TraceEvent(t * 1e6, "barrier", k.nid))
                    dram += k.bytes_total
                    inter += k.intermediate_bytes
                continue
            fused_kernels += 1
            actor = "+".join(members)
            events.append(
                TraceEvent(
                    t * 1e6,
                    "dispatch",
                    actor,
                    detail=f"{plan.n_ctas} ctas, tile_m={plan.tile_m}",
                )
            )
            for i, st in enumerate(plan.phase_stats):
                phase_T = max(st["t_compute_s"], st["t_mem_s"])
                name = "+".join(plan.phases[i])
                events.append(TraceEvent(t * 1e6, "compute", name, dur_us=st["t_compute_s"] * 1e6))
                if st["bytes"]:
                    events.append(
                        TraceEvent(t * 1e6, "transfer", name, dur_us=st["t_mem_s"] * 1e6, bytes=st["bytes"])
                    )
                util.add_sm(t, t + st["t_compute_s"], range(plan.n_ctas))
                util.add_dram(t, t + phase_T, st["bytes"])
                t += phase_T
                if i + 1 < len(plan.phase_stats):
                    events.append(TraceEvent(t * 1e6, "fence", actor))
                    t += machine.dram_latency_s
            for tensor in plan.spilled:
                rt = 2 * _tensor_bytes(graph, tensor)
                events.append(
                    TraceEvent(
                        t * 1e6,
                        "spill",
                        tensor,
                        bytes=rt,
                        detail=f"latency_cycles={machine.dram_latency_cycles}",
                    )
                )
                t += machine.dram_latency_s
            spill_count += len(plan.spilled)
            spill_rt_bytes += plan.spill_round_trip_bytes
            dram += plan.bytes_total
            inter += plan.intermediate_bytes
            events.append(TraceEvent(t * 1e6, "barrier", actor))
        else:
            k = _bsp_kernel(graph, members[0], machine)
            T = k.time_s
            events.append(TraceEvent(t * 1e6, "dispatch", k.nid))
            events.append(TraceEvent(t * 1e6, "compute", k.nid, dur_us=k.t_compute_s * 1e6))
            events.append(
                TraceEvent(t * 1e6, "transfer", k.nid, dur_us=k.t_mem_s * 1e6, bytes=k.bytes_total)
            )
            util.add_sm(t, t + k.t_compute_s, range(min(k.ctas, machine.sm_count)))
            util.add_dram(t, t + T, k.bytes_total)
            t += T
            events.append(TraceEvent(t * 1e6, "barrier", k.nid))
            dram += k.bytes_total
            inter += k.intermediate_bytes

    samples, sm_avg, dram_avg = util.finalize(t)
    return ExecTrace(
        graph_name=graph.name,
        mode="vertical",
        machine_name=machine.name,
        time_us=t * 1e6,
        cycles=round(t * machine.clock_hz),
        dram_bytes=dram,
        queue_l2_bytes=0,
        intermediate_dram_bytes=inter,
        flops=_graph_flops_by_class(graph),
        counters={
            "fused_kernels": fused_kernels,
            "fallback_groups": fallbacks,
            "spill_count": spill_count,
            "spill_round_trip_bytes": spill_rt_bytes,
            "spill_latency_cycles": machine.dram_latency_cycles,
            "utilization": {"sm_avg": round(sm_avg, 6), "dram_avg": round(dram_avg, 6)},
        },
        meta={"coverage": selection.coverage},
        events=events,
        samples=samples,
    )


# ---------------------------------------------------------------------------
# SM grid scheduling (dataflow)
# ---------------------------------------------------------------------------


def grid_schedule(
    requests: list[tuple[str, OpClass, int]], sm_count: int
) -> dict[str, list[int]]:
    """Place CTAs with one round-robin arbiter per pipe class so tensor and
    SIMT stages land together on the same SMs."""

    pointers = {OpClass.TENSOR: 0, OpClass.SIMT: 0}
    slots: dict[OpClass, list[str | None]] = {
        OpClass.TENSOR: [None] * sm_count,
        OpClass.SIMT: [None] * sm_count,
    }
    placement: dict[str, list[int]] = {}
    for stage_id, op_class, count in requests:
        homes: list[int] = []
        for _ in range(count):
            start = pointers[op_class]
            for probe in range(sm_count):
                sm = (start + probe) % sm_count
                if slots[op_class][sm] is None:
                    slots[op_class][sm] = stage_id
                    homes.append(sm)
                    pointers[op_class] = (sm + 1) % sm_count
                    break
            else:
                raise KitsuneError(
                    f"grid schedule cannot fit stage '{stage_id}': "
                    f"all {sm_count} {op_class.value} slots are occupied"
                )
        placement[stage_id] = homes
    return placement


def greedy_schedule(
    requests: list[tuple[str, OpClass, int]], sm_count: int
) -> dict[str, list[int]]:
    """Single-arbiter baseline: one shared pointer walks the grid regardless
    of pipe class, so complementary stages drift onto disjoint SMs."""

    pointer = 0
    slots: dict[OpClass, list[str | None]] = {
        OpClass.TENSOR: [None] * sm_count,
        OpClass.SIMT: [None] * sm_count,
    }
    placement: dict[str, list[int]] = {}
    for stage_id, op_class, count in requests:
        homes: list[int] = []
        for _ in range(count):
            for probe in range(sm_count):
                sm = (pointer + probe) % sm_count
                if slots[op_class][sm] is None:
                    slots[op_class][sm] = stage_id
                    homes.append(sm)
                    pointer = (sm + 1) % sm_count
                    break
            else:
                raise KitsuneError(
                    f"grid schedule cannot fit stage '{stage_id}': "
                    f"all {sm_count} {op_class.value} slots are occupied"
                )
        placement[stage_id] = homes
    return placement


def pairing_stats(
    placement: dict[str, list[int]], requests: list[tuple[str, OpClass, int]]
) -> dict[str, int]:
    cls_of = {sid: cls for sid, cls, _ in requests}
    by_sm: dict[int, set[OpClass]] = {}
    for sid, homes in placement.items():
        for sm in homes:
            by_sm.setdefault(sm, set()).add(cls_of[sid])
    paired = sum(1 for classes in by_sm.values() if len(classes) == 2)
    return {"occupied": len(by_sm), "paired": paired}


# ---------------------------------------------------------------------------
# fluid bandwidth channels
# ---------------------------------------------------------------------------


class _Flow:
    __slots__ = ("bytes_left", "lane_cap", "rate", "last_t", "done_cb", "seq", "version")

    def __init__(self, nbytes: float, lane_cap: float | None, done_cb, seq: int):
        self.bytes_left = float(nbytes)
        self.lane_cap = lane_cap
        self.rate = 0.0
        self.last_t = 0.0
        self.done_cb = done_cb
        self.seq = seq
        self.version = 0


class _Channel:
    """Max-min fluid sharing: flows split the channel cap equally, except
    flows pinned below the fair share by their own lane cap."""

    def __init__(self, sim: "_Sim", cap_bytes_per_s: float):
        self.sim = sim
        self.cap = cap_bytes_per_s
        self.flows: dict[_Flow, None] = {}

    def _settle(self) -> None:
        now = self.sim.now
        for f in self.flows:
            f.bytes_left -= f.rate * (now - f.last_t)
            if f.bytes_left < 0:
                f.bytes_left = 0.0
            f.last_t = now

    def _rebalance(self) -> None:
        flows = list(self.flows)
        if not flows:
            return
        remaining = self.cap
        pending = sorted(
            flows,
            key=lambda f: (f.lane_cap if f.lane_cap is not None else math.inf, f.seq),
        )
        for i, f in enumerate(pending):
            fair = remaining / (len(pending) - i)
            rate = min(fair, f.lane_cap) if f.lane_cap is not None else fair
            f.rate = rate
            remaining -= rate
        for f in flows:
            f.version += 1
            if f.rate <= 0:
                continue
            fin = self.sim.now + f.bytes_left / f.rate
            v = f.version
            self.sim.at(fin, lambda f=f, v=v: self._on_finish(f, v))

    def add(self, nbytes: float, lane_cap: float | None, done_cb) -> None:
        if nbytes <= 0:
            self.sim.at(self.sim.now, done_cb)
            return
        self._settle()
        f = _Flow(nbytes, lane_cap, done_cb, self.sim.next_seq())
        f.last_t = self.sim.now
        self.flows[f] = None
        self._rebalance()

    def _on_finish(self, f: _Flow, version: int) -> None:
        if f not in self.flows or f.version != version:
            return
        self._settle()
        # a residual is real only if draining it still advances the clock;
        # below one ulp of `now` the finish event would loop at constant time
        if f.bytes_left > 1e-6 and f.rate > 0 and self.sim.now + f.bytes_left / f.rate > self.sim.now:
            self._rebalance()  # rates changed under us; reschedule
            return
        del self.flows[f]
        self._rebalance()
        f.done_cb()


class _Sim:
    def __init__(self, start_s: float = 0.0):
        self.now = start_s
        self._heap: list[tuple[float, int, object]] = []
        self._seq = 0

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def at(self, t: float, fn) -> None:
        heapq.heappush(self._heap, (max(t, self.now), self.next_seq(), fn))

    def run(self) -> None:
        while self._heap:
            t, _, fn = heapq.heappop(self._heap)
            self.now = t
            fn()


# ---------------------------------------------------------------------------
# dataflow mode
# ---------------------------------------------------------------------------


def _split_bytes(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


class _QueueRun:
    def __init__(self, spec, rows_per_tile: int, spilled: bool):
        self.spec = spec
        self.ring = RingQueue(depth=spec.depth, consumers=len(spec.consumers))
        self.row_bytes = spec.payload_bytes // rows_per_tile
        self.consumer_index = {sid: i for i, sid in enumerate(spec.consumers)}
        self.spilled = spilled  # queue demoted to DRAM when L2 ran out
        self.wait_pub: list = []  # consumers blocked on an empty ring
        self.wait_rel: list = []  # the producer blocked on a full ring


class _StageRun:
    def __init__(self, engine: "_PipelineRun", spec, sm_ids: list[int]):
        self.eng = engine
        self.spec = spec
        self.sm_ids = sm_ids
        self.a = len(sm_ids)
        g = engine.graph
        dt = g.dtype_bytes
        if spec.op_class is OpClass.TENSOR and spec.nodes:
            prim = op_work(g.nodes[spec.nodes[0]], dt).flops
            self.tensor_flops = prim
            self.simt_flops = spec.flops_total - prim
        else:
            self.tensor_flops = 0
            self.simt_flops = spec.flops_total
        self.in_q = [engine.queues[qid] for qid in spec.in_queues]
        self.out_q = [engine.queues[qid] for qid in spec.out_queues]
        self.dram_in_split = _split_bytes(spec.dram_in_bytes, spec.iters)
        n_writes = 1 if spec.accumulating else spec.tiles_total
        self.dram_out_split = _split_bytes(spec.dram_out_bytes, n_writes)
        self.n_writes = n_writes
        # reader state
        self.next_read = 0
        self.read_busy = False
        self.read_held: dict[str, int] = {}  # queue id -> acquired seq
        self.read_flows_left = 0
        self.ready: list[tuple[int, int]] = []  # (iter, rows); holds at most 1
        # compute state
        self.compute_busy = False
        self.computed = 0
        self.done_tile: tuple[int, int] | None = None
        # writer state
        self.next_write = 0
        self.write_busy = False
        self.write_flows_left = 0
        self.finished = False
        # bookkeeping
        self.busy_s = 0.0
        self.stall_since: float | None = None
        self.stall_reason = ""
        self.stalls: dict[str, list] = {}  # reason -> [count, seconds]
        self.q_read_bytes = 0
        self.q_write_bytes = 0
        self.first_t: float | None = None
        self.done_t: float | None = None

    # -- helpers ----------------------------------------------------------
    def _rows_of(self, it: int) -> int:
        p = self.eng.pipe
        return min(p.rows_per_tile, p.lead_rows - it * p.rows_per_tile)

    def _note_stall(self, reason: str) -> None:
        if self.stall_since is None:
            self.stall_since = self.eng.sim.now
            self.stall_reason = reason

    def _end_stall(self) -> None:
        if self.stall_since is not None:
            rec = self.stalls.setdefault(self.stall_reason, [0, 0.0])
            rec[0] += 1
            rec[1] += self.eng.sim.now - self.stall_since
            self.stall_since = None
            self.stall_reason = ""

    def _wake_later(self, block_start: float, fn) -> None:
        poll = self.eng.machine.poll_interval_ns * 1e-9
        now = self.eng.sim.now
        if now <= block_start:
            self.eng.sim.at(now, fn)
            return
        ticks = math.ceil((now - block_start) / poll - 1e-12)
        self.eng.sim.at(block_start + ticks * poll, fn)

    # -- reader -----------------------------------------------------------
    def pump(self) -> None:
        # drain downstream first so the reader sees freed buffers and can
        # prefetch the next tile while this one computes
        self._try_write()
        self._try_compute()
        self._try_read()

    def _try_read(self) -> None:
        if self.read_busy or self.next_read >= self.spec.iters or self.ready:
            return
        it = self.next_read
        for q in self.in_q:
            if q.spec.id in self.read_held:
                continue
            res = q.ring.rd_acquire(q.consumer_index[self.spec.id])
            if isinstance(res, Blocked):
                self._note_stall(f"queue-empty:{q.spec.id}")
                start = self.stall_since
                q.wait_pub.append(lambda s=start: self._wake_later(s, self.pump))
                return
            self.read_held[q.spec.id] = res.seq
        self._end_stall()
        self.read_busy = True
        if self.first_t is None:
            self.first_t = self.eng.sim.now
        rows = self._rows_of(it)
        flows = 0
        sync_s = 0.0
        for q in self.in_q:
            nbytes = rows * q.row_bytes
            self.q_read_bytes += nbytes
            self.eng.count_queue_read(q, nbytes)
            flows += 1
            lane = self.a * self.eng.machine.lane_gbps(q.spec.payload_bytes) * GB
            chan = self.eng.dram if q.spilled else self.eng.qchan
            chan.add(nbytes, None if q.spilled else lane, self._read_flow_done)
            sync_s = HOP_ATOMICS / self.eng.machine.atomics_per_s
        db = self.dram_in_split[it]
        if db > 0:
            flows += 1
            self.eng.add_dram_flow(db, self._read_flow_done)
        self.read_sync_s = sync_s
        if flows == 0:
            self.read_flows_left = 1
            self.eng.sim.at(self.eng.sim.now, self._read_flow_done)
        else:
            self.read_flows_left = flows

    def _read_flow_done(self) -> None:
        self.read_flows_left -= 1
        if self.read_flows_left > 0:
            return
        if self.read_sync_s > 0:
            s, self.read_sync_s = self.read_sync_s, 0.0
            self.eng.sim.at(self.eng.sim.now + s, self._read_flow_done)
            self.read_flows_left = 1
            return
        it = self.next_read
        for q in self.in_q:
            seq = self.read_held.pop(q.spec.id)
            q.ring.rd_release(q.consumer_index[self.spec.id], seq)
            for fn in q.wait_rel:
                fn()
            q.wait_rel.clear()
        self.ready.append((it, self._rows_of(it)))
        self.next_read += 1
        self.read_busy = False
        self.pump()

    # -- compute ----------------------------------------------------------
    def _try_compute(self) -> None:
        if self.compute_busy or not self.ready or self.done_tile is not None:
            return
        it, rows = self.ready.pop(0)
        self.compute_busy = True
        if self.first_t is None:
            self.first_t = self.eng.sim.now
        m = self.eng.machine
        dur = 0.0
        if self.tensor_flops:
            factor = _pad_rows_factor(rows)
            dur += (self.tensor_flops / self.spec.iters) * factor / (
                self.a * m.pipe_flops_per_sm_s(OpClass.TENSOR)
            )
        if self.simt_flops:
            dur += (self.simt_flops / self.spec.iters) / (
                self.a * m.pipe_flops_per_sm_s(OpClass.SIMT)
            )
        now = self.eng.sim.now
        self.eng.util.add_sm(now, now + dur, self.sm_ids)
        self.busy_s += dur
        self.eng.sim.at(now + dur, lambda: self._compute_done(it, rows))

    def _compute_done(self, it: int, rows: int) -> None:
        self.compute_busy = False
        self.computed += 1
        if self.spec.accumulating:
            if self.computed == self.spec.iters:
                self.done_tile = (0, self.spec.out_rows)
        else:
            self.done_tile = (it, rows)
        self.pump()

    # -- writer -----------------------------------------------------------
    def _try_write(self) -> None:
        if self.write_busy or self.done_tile is None:
            return
        it, rows = self.done_tile
        for q in self.out_q:
            res = q.ring.wr_acquire()
            if isinstance(res, Blocked):
                self._note_stall(f"queue-full:{q.spec.id}")
                start = self.stall_since
                q.wait_rel.append(lambda s=start: self._wake_later(s, self.pump))
                return
            self._wr_seq = res.seq
        self._end_stall()
        self.write_busy = True
        self.done_tile = None
        flows = 0
        sync_s = 0.0
        for q in self.out_q:
            nbytes = rows * q.row_bytes
            self.q_write_bytes += nbytes
            self.eng.count_queue_write(q, nbytes)
            flows += 1
            lane = self.a * self.eng.machine.lane_gbps(q.spec.payload_bytes) * GB
            chan = self.eng.dram if q.spilled else self.eng.qchan
            chan.add(nbytes, None if q.spilled else lane, self._write_flow_done)
            sync_s = HOP_ATOMICS / self.eng.machine.atomics_per_s
        db = self.dram_out_split[it] if it < len(self.dram_out_split) else 0
        if db > 0:
            flows += 1
            self.eng.add_dram_flow(db, self._write_flow_done)
        self.write_sync_s = sync_s
        self._write_iter = it
        if flows == 0:
            self.write_flows_left = 1
            self.eng.sim.at(self.eng.sim.now, self._write_flow_done)
        else:
            self.write_flows_left = flows

    def _write_flow_done(self) -> None:
        self.write_flows_left -= 1
        if self.write_flows_left > 0:
            return
        if self.write_sync_s > 0:
            s, self.write_sync_s = self.write_sync_s, 0.0
            self.eng.sim.at(self.eng.sim.now + s, self._write_flow_done)
            self.write_flows_left = 1
            return
        for q in self.out_q:
            q.ring.wr_release(self._wr_seq)
            for fn in q.wait_pub:
                fn()
            q.wait_pub.clear()
        self.next_write += 1
        self.write_busy = False
        if self.next_write == self.n_writes:
            self.finished = True
            self.done_t = self.eng.sim.now
            self.eng.stage_finished()
        self.pump()


class _PipelineRun:
    def __init__(
        self,
        graph: OperatorGraph,
        pipe: PipelineSpec,
        machine: MachineConfig,
        util: _UtilAccum,
        start_s: float,
        l2_budget: int,
    ):
        self.graph = graph
        self.pipe = pipe
        self.machine = machine
        self.util = util
        self.sim = _Sim(start_s)
        self.dram = _Channel(self.sim, machine.dram_gbps * GB)
        # raw L2 movement is payload written plus payload read back
        self.qchan = _Channel(self.sim, 2 * machine.aggregate_queue_gbps * GB)

        alloc = solve_allocation(pipe, machine)
        self.alloc = alloc
        requests = [(s.id, s.op_class, alloc.cta[s.id]) for s in pipe.stages]
        self.placement = grid_schedule(requests, machine.sm_count)
        self.pairing = pairing_stats(self.placement, requests)

        # demote whole queues to DRAM if their pinned footprint overflows L2
        spilled: set[str] = set()
        used = 0
        for q in pipe.queues:
            used += q.footprint_bytes
            if used > l2_budget:
                spilled.add(q.id)
        self.spilled_queues = spilled
        self.queues = {
            q.id: _QueueRun(q, pipe.rows_per_tile, q.id in spilled) for q in pipe.queues
        }
        self.stages = [_StageRun(self, s, self.placement[s.id]) for s in pipe.stages]
        self._unfinished = len(self.stages)
        self.q_l2_bytes = 0
        self.q_dram_bytes = 0
        self._dram_flow_bytes = 0

    def count_queue_read(self, q: _QueueRun, nbytes: int) -> None:
        if q.spilled:
            self.q_dram_bytes += nbytes
        else:
            self.q_l2_bytes += nbytes

    def count_queue_write(self, q: _QueueRun, nbytes: int) -> None:
        if q.spilled:
            self.q_dram_bytes += nbytes
        else:
            self.q_l2_bytes += nbytes

    def add_dram_flow(self, nbytes: int, done_cb) -> None:
        t0 = self.sim.now
        self._dram_flow_bytes += nbytes

        def finish():
            self.util.add_dram(t0, self.sim.now, nbytes)
            done_cb()

        self.dram.add(nbytes, None, finish)

    def stage_finished(self) -> None:
        self._unfinished -= 1

    def run(self) -> float:
        for st in self.stages:
            st.pump()
        self.sim.run()
        if self._unfinished:
            stuck = [st.spec.id for st in self.stages if not st.finished]
            raise KitsuneError(
                f"pipeline '{self.pipe.sf_id}' stalled with unfinished stages: {stuck}"
            )
        # the heap may drain through stale flow-reschedule events stamped at
        # pessimistic times; the pipeline ends at the last stage completion
        return max(st.done_t for st in self.stages)


def run_dataflow(
    graph: OperatorGraph,
    machine: MachineConfig | None = None,
    selection: Selection | None = None,
    config: PipelineConfig | None = None,
) -> ExecTrace:
    machine = machine or MachineConfig()
    selection = selection or select(graph)
    config = config or PipelineConfig()

    sf_members = {tuple(sf.members): sf for sf in selection.sf_nodes}
    items: list[list[str]] = [list(m) for m in sf_members]
    covered = {nid for members in items for nid in members}
    pipeline_items = set(range(len(items)))
    for nid in graph.order:
        if nid not in covered:
            items.append([nid])

    util = _UtilAccum(machine)
    events: list[TraceEvent] = []
    t = 0.0
    dram = inter = l2 = 0
    stall_us: dict[str, dict[str, float]] = {}
    cta_meta: dict[str, int] = {}
    pairing = {"occupied": 0, "paired": 0}
    spilled_queues: list[str] = []
    for idx in _order_items(graph, items):
        members = items[idx]
        if idx in pipeline_items:
            sf = sf_members[tuple(members)]
            pipe = build_pipeline(graph, sf, config)
            run = _PipelineRun(graph, pipe, machine, util, t, machine.l2_capacity_bytes)
            events.append(
                TraceEvent(
                    t * 1e6,
                    "dispatch",
                    sf.id,
                    detail=f"{len(pipe.stages)} stages, {pipe.tiles} tiles",
                )
            )
            end = run.run()
            for st in run.stages:
                first = st.first_t if st.first_t is not None else t
                done = st.done_t if st.done_t is not None else end
                events.append(
                    TraceEvent(
                        first * 1e6,
                        "compute",
                        st.spec.id,
                        dur_us=st.busy_s * 1e6,
                        detail=f"{st.spec.iters} tiles on {st.a} SMs",
                    )
                )
                if st.q_read_bytes or st.q_write_bytes:
                    events.append(
                        TraceEvent(
                            first * 1e6,
                            "transfer",
                            st.spec.id,
                            bytes=st.q_read_bytes + st.q_write_bytes,
                            detail="ring-queue payload",
                        )
                    )
                for reason, (count, sec) in sorted(st.stalls.items()):
                    events.append(
                        TraceEvent(
                            first * 1e6,
                            "stall",
                            st.spec.id,
                            dur_us=sec * 1e6,
                            detail=f"{reason} x{count}",
                        )
                    )
                    stall_us.setdefault(st.spec.id, {})[reason] = round(sec * 1e6, 6)
                events.append(TraceEvent(done * 1e6, "done", st.spec.id))
                cta_meta[st.spec.id] = st.a
                dram += st.spec.dram_in_bytes + st.spec.dram_out_bytes
            l2 += run.q_l2_bytes
            dram += run.q_dram_bytes
            inter += run.q_dram_bytes
            pairing["occupied"] += run.pairing["occupied"]
            pairing["paired"] += run.pairing["paired"]
            spilled_queues.extend(sorted(run.spilled_queues))
            t = end
            events.append(TraceEvent(t * 1e6, "barrier", sf.id))
        else:
            k = _bsp_kernel(graph, members[0], machine)
            T = k.time_s
            events.append(TraceEvent(t * 1e6, "dispatch", k.nid, detail="uncovered"))
            events.append(TraceEvent(t * 1e6, "compute", k.nid, dur_us=k.t_compute_s * 1e6))
            events.append(
                TraceEvent(t * 1e6, "transfer", k.nid, dur_us=k.t_mem_s * 1e6, bytes=k.bytes_total)
            )
            util.add_sm(t, t + k.t_compute_s, range(min(k.ctas, machine.sm_count)))
            util.add_dram(t, t + T, k.bytes_total)
            t += T
            events.append(TraceEvent(t * 1e6, "barrier", k.nid))
            dram += k.bytes_total
            inter += k.intermediate_bytes

    samples, sm_avg, dram_avg = util.finalize(t)
    return ExecTrace(
        graph_name=graph.name,
        mode="dataflow",
        machine_name=machine.name,
        time_us=t * 1e6,
        cycles=round(t * machine.clock_hz),
        dram_bytes=dram,
        queue_l2_bytes=l2,
        intermediate_dram_bytes=inter,
        flops=_graph_flops_by_class(graph),
        counters={
            "stall_us": stall_us,
            "spilled_queues": spilled_queues,
            "utilization": {"sm_avg": round(sm_avg, 6), "dram_avg": round(dram_avg, 6)},
        },
        meta={
            "coverage": selection.coverage,
            "cta": cta_meta,
            "sm_pairing": pairing,
        },
        events=events,
        samples=samples,
    )


# ---------------------------------------------------------------------------
# dispatcher
# ---------------------------------------------------------------------------


def run(
    graph: OperatorGraph,
    mode: str,
    machine: MachineConfig | None = None,
    selection: Selection | None = None,
    config: PipelineConfig | None = None,
) -> ExecTrace:
    if mode == "bsp":
        return run_bsp(graph, machine)
    if mode == "vertical":
        return run_vertical(graph, machine, selection)
    if mode == "dataflow":
        return run_dataflow(graph, machine, selection, config)
    raise KitsuneError(f"unknown mode '{mode}'; expected one of {', '.join(MODES)}")
