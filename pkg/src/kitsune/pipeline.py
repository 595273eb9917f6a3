"""Lower selected sf-nodes into spatial pipelines of stages and queues.

Stage formation fuses single-consumer Elementwise epilogues into their
producer stage (those intermediates live in registers and never move), then
creates one multicast ring queue per remaining intermediate tensor.  Wide
reductions are split into a fan-in tree of fixed arity.  All streamed
tensors in a pipeline share one tile row count, chosen so the largest queued
tile still fits the per-queue payload budget; consumers therefore consume
tiles in exactly the order producers emit them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from kitsune.errors import PipelineError
from kitsune.graph import OpClass, OperatorGraph, OperatorKind, op_work
from kitsune.patterns import Selection, SfNode

CACHE_LINE_BYTES = 128
# every ring entry carries head/tail sequence metadata padded to two lines
METADATA_LINES_PER_ENTRY = 2


@dataclass
class PipelineConfig:
    payload_budget: int = 128 * 1024
    queue_depth: int = 2
    reduce_arity: int = 2

    def to_dict(self) -> dict:
        return {
            "payload_budget": self.payload_budget,
            "queue_depth": self.queue_depth,
            "reduce_arity": self.reduce_arity,
        }

    @staticmethod
    def from_dict(data: dict) -> "PipelineConfig":
        cfg = PipelineConfig()
        for key in ("payload_budget", "queue_depth", "reduce_arity"):
            if key in data:
                value = data[key]
                if not isinstance(value, int) or value <= 0:
                    raise PipelineError(f"config '{key}' must be a positive integer")
                setattr(cfg, key, value)
        return cfg


@dataclass
class QueueSpec:
    id: str
    producer: str  # stage id
    consumers: list[str]  # stage ids, in stage order
    tensor: str  # graph node id whose output streams through
    payload_bytes: int  # ring entry payload allocation (max tile)
    depth: int

    @property
    def footprint_bytes(self) -> int:
        meta = self.depth * METADATA_LINES_PER_ENTRY * CACHE_LINE_BYTES
        return self.depth * self.payload_bytes + meta

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "producer": self.producer,
            "consumers": list(self.consumers),
            "tensor": self.tensor,
            "payload_bytes": self.payload_bytes,
            "depth": self.depth,
        }


@dataclass
class StageSpec:
    id: str
    sf_id: str
    nodes: list[str]  # fused graph nodes; empty for synthetic tree stages
    op_class: OpClass
    iters: int  # input tiles consumed over the run
    tiles_total: int  # output tiles emitted over the run
    accumulating: bool  # emits only after consuming every input tile
    in_queues: list[str]
    out_queues: list[str]
    flops_total: int
    dram_in_bytes: int  # entries, weights, side operands, boundary reads
    dram_out_bytes: int  # exit writes plus any saved-for-training copies
    out_rows: int  # streamed tile rows (= pipeline rows_per_tile)
    out_cols: int
    out_row_bytes: int

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "sf_id": self.sf_id,
            "nodes": list(self.nodes),
            "op_class": self.op_class.value,
            "iters": self.iters,
            "tiles_total": self.tiles_total,
            "accumulating": self.accumulating,
            "in_queues": list(self.in_queues),
            "out_queues": list(self.out_queues),
            "flops_total": self.flops_total,
            "dram_in_bytes": self.dram_in_bytes,
            "dram_out_bytes": self.dram_out_bytes,
            "out_rows": self.out_rows,
            "out_cols": self.out_cols,
            "out_row_bytes": self.out_row_bytes,
        }


@dataclass
class PipelineSpec:
    sf_id: str
    pattern: str
    stages: list[StageSpec]
    queues: list[QueueSpec]
    rows_per_tile: int
    lead_rows: int
    config: PipelineConfig

    def stage(self, stage_id: str) -> StageSpec:
        for s in self.stages:
            if s.id == stage_id:
                return s
        raise KeyError(stage_id)

    def queue(self, queue_id: str) -> QueueSpec:
        for q in self.queues:
            if q.id == queue_id:
                return q
        raise KeyError(queue_id)

    @property
    def l2_footprint_bytes(self) -> int:
        return sum(q.footprint_bytes for q in self.queues)

    @property
    def tiles(self) -> int:
        return math.ceil(self.lead_rows / self.rows_per_tile)

    def to_dict(self) -> dict:
        return {
            "sf_id": self.sf_id,
            "pattern": self.pattern,
            "rows_per_tile": self.rows_per_tile,
            "lead_rows": self.lead_rows,
            "config": self.config.to_dict(),
            "stages": [s.to_dict() for s in self.stages],
            "queues": [q.to_dict() for q in self.queues],
        }

    @staticmethod
    def from_dict(data: dict) -> "PipelineSpec":
        stages = [
            StageSpec(
                id=raw["id"],
                sf_id=raw["sf_id"],
                nodes=list(raw["nodes"]),
                op_class=OpClass(raw["op_class"]),
                iters=raw["iters"],
                tiles_total=raw["tiles_total"],
                accumulating=raw["accumulating"],
                in_queues=list(raw["in_queues"]),
                out_queues=list(raw["out_queues"]),
                flops_total=raw["flops_total"],
                dram_in_bytes=raw["dram_in_bytes"],
                dram_out_bytes=raw["dram_out_bytes"],
                out_rows=raw["out_rows"],
                out_cols=raw["out_cols"],
                out_row_bytes=raw["out_row_bytes"],
            )
            for raw in data["stages"]
        ]
        queues = [
            QueueSpec(
                id=raw["id"],
                producer=raw["producer"],
                consumers=list(raw["consumers"]),
                tensor=raw["tensor"],
                payload_bytes=raw["payload_bytes"],
                depth=raw["depth"],
            )
            for raw in data["queues"]
        ]
        return PipelineSpec(
            sf_id=data["sf_id"],
            pattern=data.get("pattern", ""),
            stages=stages,
            queues=queues,
            rows_per_tile=data["rows_per_tile"],
            lead_rows=data["lead_rows"],
            config=PipelineConfig.from_dict(data.get("config", {})),
        )


# ---------------------------------------------------------------------------
# stage formation
# ---------------------------------------------------------------------------


def _epilogue_groups(graph: OperatorGraph, members: list[str]) -> list[list[str]]:
    """Partition members into stages: each group is a primary node followed
    by a run of single-consumer Elementwise epilogues."""

    member_set = set(members)
    absorbed: set[str] = set()
    groups: list[list[str]] = []
    for nid in members:
        if nid in absorbed:
            continue
        group = [nid]
        tail = nid
        while True:
            consumers = graph.consumers[tail]
            if len(consumers) != 1:
                break
            nxt = consumers[0]
            node = graph.nodes[nxt]
            if (
                nxt not in member_set
                or node.kind is not OperatorKind.ELEMENTWISE
                or nxt in absorbed
            ):
                break
            # the epilogue must take the producer as its tensor input; other
            # inputs (e.g. a broadcast bias) may come from DRAM
            in_sf_inputs = [p for p in node.inputs if p in member_set]
            if in_sf_inputs != [tail]:
                break
            group.append(nxt)
            absorbed.add(nxt)
            tail = nxt
        groups.append(group)
    return groups


def _tile_rows(row_bytes: int, lead_rows: int, budget: int) -> int:
    rows = budget // row_bytes if row_bytes > 0 else lead_rows
    return max(1, min(rows, lead_rows))


def build_pipeline(
    graph: OperatorGraph, sf: SfNode, config: PipelineConfig | None = None
) -> PipelineSpec:
    config = config or PipelineConfig()
    if not sf.members:
        raise PipelineError(f"sf-node '{sf.id}' has no members")
    member_set = set(sf.members)
    dtype = graph.dtype_bytes

    groups = _epilogue_groups(graph, sf.members)
    primary_of = {g[0]: g for g in groups}
    tail_of = {g[0]: g[-1] for g in groups}  # stage id -> node whose output leaves the stage
    stage_of_node = {nid: g[0] for g in groups for nid in g}

    # --- split wide reductions into fan-in trees -------------------------
    # order stages by topo position of their primary node
    topo_pos = {nid: i for i, nid in enumerate(graph.order)}
    stage_ids = sorted(primary_of, key=topo_pos.__getitem__)

    # producer stage -> consuming stages (for queue creation), derived from
    # graph edges whose endpoints landed in different stages
    consumers_of_stage: dict[str, list[str]] = {sid: [] for sid in stage_ids}
    fanin_sources: dict[str, list[str]] = {}  # reduce stage -> producing stages in arg order
    for sid in stage_ids:
        primary = graph.nodes[sid]
        sources: list[str] = []
        for producer in primary.inputs:
            if producer in member_set:
                src_stage = stage_of_node[producer]
                if src_stage != sid:
                    sources.append(src_stage)
        fanin_sources[sid] = sources
        for src in dict.fromkeys(sources):
            consumers_of_stage[src].append(sid)

    @dataclass
    class _Build:
        id: str
        nodes: list[str]
        op_class: OpClass
        flops: int
        dram_in: int
        dram_out: int
        out_shape: tuple[int, ...]
        accumulating: bool
        tail_saved: bool = False  # tail output checkpointed for training
        sources: list[str] = field(default_factory=list)  # producing stage ids

    builds: dict[str, _Build] = {}
    order: list[str] = []

    for sid in stage_ids:
        group = primary_of[sid]
        primary = graph.nodes[sid]
        tail = graph.nodes[tail_of[sid]]
        flops = 0
        dram_in = 0
        dram_out = 0
        for nid in group:
            node = graph.nodes[nid]
            work = op_work(node, dtype)
            flops += work.flops
            if node.attrs.get("save") and nid != tail_of[sid]:
                # folded member never reaches DRAM on its own; checkpoint it
                dram_out += math.prod(node.output_shape) * dtype
            if node.kind is OperatorKind.LINEAR:
                k, n = node.attrs["K"], node.attrs["N"]
                dram_in += k * n * dtype  # weight operand always streams from DRAM
                if not node.inputs:
                    dram_in += node.attrs["M"] * k * dtype  # entry activation
            if node.kind is OperatorKind.CONCAT and "entry_shape" in node.attrs:
                dram_in += math.prod([d for d in node.attrs["entry_shape"]]) * dtype
            if node.kind is OperatorKind.GATHER:
                dram_in += work.input_bytes
            for producer in node.inputs:
                if producer not in member_set:
                    # boundary tensor arrives via DRAM
                    dram_in += math.prod(graph.nodes[producer].output_shape) * dtype
            if not node.inputs and node.kind is not OperatorKind.LINEAR:
                # entry operand (e.g. an incoming gradient) read from DRAM
                dram_in += work.input_bytes

        accumulating = bool(
            primary.kind is OperatorKind.LINEAR and primary.attrs.get("transpose_input")
        ) or (
            primary.kind is OperatorKind.REDUCE
            and len(primary.inputs) == 1
            and primary.attrs.get("axis") == 0
        )
        builds[sid] = _Build(
            id=sid,
            nodes=list(group),
            op_class=primary.op_class,
            flops=flops,
            dram_in=dram_in,
            dram_out=dram_out,
            out_shape=tail.output_shape,
            accumulating=accumulating,
            tail_saved=bool(tail.attrs.get("save")),
            sources=fanin_sources[sid],
        )
        order.append(sid)

    # fan-in trees: insert combining stages so no stage sums more than
    # reduce_arity streams
    arity = config.reduce_arity
    if arity < 2:
        raise PipelineError("reduce_arity must be at least 2")
    for sid in list(order):
        build = builds[sid]
        primary = graph.nodes[sid]
        if primary.kind is not OperatorKind.REDUCE or len(build.sources) <= arity:
            continue
        out_elems = math.prod(build.out_shape)
        reduce_own_flops = op_work(primary, dtype).flops
        epilogue_flops = build.flops - reduce_own_flops
        level = 0
        streams = list(build.sources)
        insert_at = order.index(sid)
        while len(streams) > arity:
            next_streams: list[str] = []
            for i in range(0, len(streams), arity):
                chunk = streams[i : i + arity]
                if len(chunk) == 1:
                    next_streams.append(chunk[0])
                    continue
                tid = f"{sid}~t{level}.{i // arity}"
                builds[tid] = _Build(
                    id=tid,
                    nodes=[],
                    op_class=OpClass.SIMT,
                    flops=(len(chunk) - 1) * out_elems,
                    dram_in=0,
                    dram_out=0,
                    out_shape=build.out_shape,
                    accumulating=False,
                    sources=chunk,
                )
                order.insert(insert_at, tid)
                insert_at += 1
                next_streams.append(tid)
            streams = next_streams
            level += 1
        # the reduce stage itself performs the last combine
        build.sources = streams
        build.flops = (len(streams) - 1) * out_elems + epilogue_flops

    # --- queues -----------------------------------------------------------
    consumers_by_producer: dict[str, list[str]] = {sid: [] for sid in order}
    for sid in order:
        for src in dict.fromkeys(builds[sid].sources):
            consumers_by_producer[src].append(sid)

    queued_producers = [sid for sid in order if consumers_by_producer[sid]]
    for sid in queued_producers:
        if builds[sid].accumulating:
            raise PipelineError(
                f"stage '{sid}' accumulates its output and cannot feed an in-pipeline queue"
            )

    # --- common tiling ----------------------------------------------------
    lead_candidates = {builds[sid].out_shape[0] for sid in queued_producers}
    if len(lead_candidates) > 1:
        raise PipelineError(
            f"queued tensors disagree on the streamed leading dimension: {sorted(lead_candidates)}"
        )
    if queued_producers:
        lead_rows = lead_candidates.pop()
        rows_per_tile = min(
            _tile_rows(
                math.prod(builds[sid].out_shape[1:]) * dtype
                if len(builds[sid].out_shape) > 1
                else dtype,
                lead_rows,
                config.payload_budget,
            )
            for sid in queued_producers
        )
    else:
        only = builds[order[0]]
        lead_rows = only.out_shape[0]
        row_bytes = (math.prod(only.out_shape[1:]) if len(only.out_shape) > 1 else 1) * dtype
        rows_per_tile = _tile_rows(row_bytes, lead_rows, config.payload_budget)
    tiles = math.ceil(lead_rows / rows_per_tile)

    queues: list[QueueSpec] = []
    queue_by_producer: dict[str, QueueSpec] = {}
    for qi, sid in enumerate(queued_producers):
        build = builds[sid]
        cols = math.prod(build.out_shape[1:]) if len(build.out_shape) > 1 else 1
        payload = rows_per_tile * cols * dtype
        q = QueueSpec(
            id=f"{sf.id}.q{qi}",
            producer=sid,
            consumers=list(consumers_by_producer[sid]),
            tensor=tail_of.get(sid, sid),
            payload_bytes=payload,
            depth=config.queue_depth,
        )
        queues.append(q)
        queue_by_producer[sid] = q

    # --- assemble stage specs ----------------------------------------------
    stages: list[StageSpec] = []
    for sid in order:
        build = builds[sid]
        in_queues = [queue_by_producer[src].id for src in dict.fromkeys(build.sources)]
        out_queues = [queue_by_producer[sid].id] if sid in queue_by_producer else []
        out_cols = math.prod(build.out_shape[1:]) if len(build.out_shape) > 1 else 1
        row_bytes = out_cols * dtype
        if build.accumulating:
            tiles_total = 1
        else:
            tiles_total = math.ceil(build.out_shape[0] / rows_per_tile)
        is_exit = not out_queues
        dram_out = build.dram_out
        # exit writes persist the tail anyway; a queued-but-saved tail still
        # needs its own checkpoint write
        if build.nodes and (is_exit or build.tail_saved):
            dram_out += math.prod(build.out_shape) * dtype
        stages.append(
            StageSpec(
                id=sid,
                sf_id=sf.id,
                nodes=build.nodes,
                op_class=build.op_class,
                iters=tiles,
                tiles_total=tiles_total,
                accumulating=build.accumulating,
                in_queues=in_queues,
                out_queues=out_queues,
                flops_total=build.flops,
                dram_in_bytes=build.dram_in,
                dram_out_bytes=dram_out,
                out_rows=min(rows_per_tile, build.out_shape[0]),
                out_cols=out_cols,
                out_row_bytes=row_bytes,
            )
        )

    return PipelineSpec(
        sf_id=sf.id,
        pattern=sf.pattern,
        stages=stages,
        queues=queues,
        rows_per_tile=rows_per_tile,
        lead_rows=lead_rows,
        config=config,
    )


def build_pipelines(
    graph: OperatorGraph, selection: Selection, config: PipelineConfig | None = None
) -> list[PipelineSpec]:
    topo_pos = {nid: i for i, nid in enumerate(graph.order)}
    ordered = sorted(selection.sf_nodes, key=lambda sf: topo_pos[sf.members[0]])
    return [build_pipeline(graph, sf, config) for sf in ordered]


def dump_pipelines(pipelines: list[PipelineSpec]) -> str:
    return json.dumps({"pipelines": [p.to_dict() for p in pipelines]}, indent=2, sort_keys=True)


def parse_pipelines(text: str) -> list[PipelineSpec]:
    data = json.loads(text)
    return [PipelineSpec.from_dict(raw) for raw in data["pipelines"]]
