"""CTA allocation across pipeline stages, solved exactly.

Each stage gets an integer CTA count a_i (one CTA per SM, so a_i is also an
SM count).  Pipeline throughput in tiles/s is limited by every stage's
compute rate — proportional to its machine share times its memory-overlap
speedup — and by the DRAM and queue bandwidth the whole pipeline consumes
per tile.  Both execution classes hand out exactly all SMs: TENSOR and SIMT
CTAs co-reside pairwise on an SM, so each class has the full machine.

The optimum is found over exact rationals: the achievable throughput is the
largest value v such that every stage can be given ceil(v / rate_i) SMs
without any class overflowing the machine; only values of the form
a * rate_i (or a bandwidth cap) can be optimal, so the candidate set is
finite and small.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

from kitsune.errors import BalanceError
from kitsune.graph import OpClass
from kitsune.machine import GB, MachineConfig
from kitsune.pipeline import PipelineSpec


@dataclass
class StageProfile:
    stage_id: str
    op_class: OpClass
    flops_per_tile: Fraction
    dram_bytes_per_tile: Fraction
    queue_bytes_per_tile: Fraction  # raw L2 traffic: payload written plus read back
    t_compute_s: Fraction  # per-tile compute time with the whole machine
    t_tile_s: Fraction  # per-tile time including bandwidth floors
    util: Fraction  # fraction of a full-machine tile spent computing
    speedup: Fraction  # 1/util: headroom gained by overlapping memory time
    per_sm_rate: Fraction | None  # tiles/s per SM; None for zero-flop stages

    def to_dict(self) -> dict:
        return {
            "stage_id": self.stage_id,
            "op_class": self.op_class.value,
            "flops_per_tile": float(self.flops_per_tile),
            "dram_bytes_per_tile": float(self.dram_bytes_per_tile),
            "queue_bytes_per_tile": float(self.queue_bytes_per_tile),
            "t_compute_us": float(self.t_compute_s) * 1e6,
            "t_tile_us": float(self.t_tile_s) * 1e6,
            "util": float(self.util),
            "speedup": float(self.speedup),
        }


@dataclass
class Allocation:
    sf_id: str
    throughput: Fraction  # pipeline tiles/s
    cta: dict[str, int]  # stage id -> SM count
    binding: str  # "compute" | "dram-bandwidth" | "queue-bandwidth"
    binding_stages: list[str]  # compute-bound stages pinning the throughput
    profiles: list[StageProfile]

    def to_dict(self) -> dict:
        return {
            "sf_id": self.sf_id,
            "throughput_tiles_per_s": float(self.throughput),
            "throughput_exact": f"{self.throughput.numerator}/{self.throughput.denominator}",
            "cta": dict(self.cta),
            "binding": self.binding,
            "binding_stages": list(self.binding_stages),
            "stages": [p.to_dict() for p in self.profiles],
        }


def profile_pipeline(pipeline: PipelineSpec, machine: MachineConfig) -> list[StageProfile]:
    dram_rate = Fraction(machine.dram_gbps * GB).limit_denominator(10**9)
    l2_raw_rate = 2 * Fraction(machine.aggregate_queue_gbps * GB).limit_denominator(10**9)
    profiles = []
    for stage in pipeline.stages:
        flops = Fraction(stage.flops_total, stage.iters)
        dram = Fraction(stage.dram_in_bytes + stage.dram_out_bytes, stage.iters)
        queue = Fraction(0)
        for qid in stage.out_queues:
            queue += pipeline.queue(qid).payload_bytes  # write into L2
        for qid in stage.in_queues:
            queue += pipeline.queue(qid).payload_bytes  # read back out
        pipe_rate = Fraction(machine.pipe_flops_per_s(stage.op_class)).limit_denominator(10**9)
        t_comp = flops / pipe_rate
        t_dram = dram / dram_rate
        t_l2 = queue / l2_raw_rate
        t_tile = max(t_comp, t_dram, t_l2)
        if t_tile == 0:
            t_tile = Fraction(1, 10**15)  # degenerate empty stage
        util = t_comp / t_tile if t_tile else Fraction(0)
        speedup = 1 / util if util else Fraction(1)
        per_sm = None
        if flops > 0:
            per_sm = pipe_rate / machine.sm_count / flops  # tiles/s on one SM
        # a stage's CTAs also move its tiles: each lane sustains only the
        # payload-calibrated bandwidth, so low-flop stages are pinned by the
        # slower of compute and transfer (reads and writes overlap)
        burst = Fraction(0)
        for qid in stage.in_queues:
            q = pipeline.queue(qid)
            lane = Fraction(machine.lane_gbps(q.payload_bytes) * GB).limit_denominator(10**9)
            burst = max(burst, Fraction(q.payload_bytes) / lane)
        for qid in stage.out_queues:
            q = pipeline.queue(qid)
            lane = Fraction(machine.lane_gbps(q.payload_bytes) * GB).limit_denominator(10**9)
            burst = max(burst, Fraction(q.payload_bytes) / lane)
        if burst > 0:
            lane_rate = 1 / burst  # tiles/s moved by one SM's lane
            per_sm = lane_rate if per_sm is None else min(per_sm, lane_rate)
        profiles.append(
            StageProfile(
                stage_id=stage.id,
                op_class=stage.op_class,
                flops_per_tile=flops,
                dram_bytes_per_tile=dram,
                queue_bytes_per_tile=queue,
                t_compute_s=t_comp,
                t_tile_s=t_tile,
                util=util,
                speedup=speedup,
                per_sm_rate=per_sm,
            )
        )
    return profiles


def _ceil_fraction(x: Fraction) -> int:
    return -((-x.numerator) // x.denominator)


def solve_rates(
    stages: list[tuple[str, OpClass, Fraction | None]],
    sm_count: int,
    caps: list[tuple[str, Fraction]] | None = None,
) -> tuple[Fraction, dict[str, int]]:
    """Maximize min-stage throughput under integer SM grants.

    ``stages`` holds (id, class, per-SM tiles/s); a None rate means the stage
    needs an SM but never limits throughput.  ``caps`` are named pipeline-wide
    throughput ceilings.  Returns the exact optimum and one allocation that
    achieves it with every class's SMs fully handed out.
    """

    caps = caps or []
    by_class: dict[OpClass, list[tuple[str, Fraction | None]]] = {}
    for sid, cls, rate in stages:
        by_class.setdefault(cls, []).append((sid, rate))
    for cls, members in by_class.items():
        if len(members) > sm_count:
            raise BalanceError(
                f"{cls.value} class needs {len(members)} stages but the machine has "
                f"{sm_count} SMs; one CTA per stage cannot fit"
            )

    cap_value = min((v for _, v in caps), default=None)
    rated = [(sid, cls, r) for sid, cls, r in stages if r is not None]
    if not rated:
        if cap_value is None:
            raise BalanceError("throughput is unbounded: no compute-rated stage and no caps")
        best = cap_value
    else:
        candidates: set[Fraction] = set()
        for _, _, rate in rated:
            for a in range(1, sm_count + 1):
                value = a * rate
                if cap_value is None or value <= cap_value:
                    candidates.add(value)
        if cap_value is not None:
            candidates.add(cap_value)

        def feasible(v: Fraction) -> bool:
            need: dict[OpClass, int] = {}
            for sid, cls, rate in rated:
                a_min = _ceil_fraction(v / rate)
                if a_min > sm_count:
                    return False
                need[cls] = need.get(cls, 0) + a_min
            for cls, members in by_class.items():
                unrated = sum(1 for _, r in members if r is None)
                if need.get(cls, 0) + unrated > sm_count:
                    return False
            return True

        ordered = sorted(candidates)
        lo, hi = 0, len(ordered) - 1
        best = None
        while lo <= hi:
            mid = (lo + hi) // 2
            if feasible(ordered[mid]):
                best = ordered[mid]
                lo = mid + 1
            else:
                hi = mid - 1
        if best is None:
            raise BalanceError("no feasible allocation at any positive throughput")

    # materialize one allocation achieving `best`
    alloc: dict[str, int] = {}
    used: dict[OpClass, int] = {cls: 0 for cls in by_class}
    for sid, cls, rate in stages:
        a = 1 if rate is None else max(1, _ceil_fraction(best / rate))
        alloc[sid] = a
        used[cls] += a
    # hand every class's leftover SMs to its last stage
    for cls, members in by_class.items():
        leftover = sm_count - used[cls]
        if leftover < 0:  # cap-limited case may still over-grant; trim surplus
            raise BalanceError(f"internal: class {cls.value} over-allocated")
        if leftover:
            alloc[members[-1][0]] += leftover
    return best, alloc


def solve_allocation(pipeline: PipelineSpec, machine: MachineConfig) -> Allocation:
    profiles = profile_pipeline(pipeline, machine)
    dram_per_tile = sum((p.dram_bytes_per_tile for p in profiles), Fraction(0))
    queue_per_tile = sum((p.queue_bytes_per_tile for p in profiles), Fraction(0))
    caps: list[tuple[str, Fraction]] = []
    if dram_per_tile > 0:
        rate = Fraction(machine.dram_gbps * GB).limit_denominator(10**9)
        caps.append(("dram-bandwidth", rate / dram_per_tile))
    if queue_per_tile > 0:
        raw = 2 * Fraction(machine.aggregate_queue_gbps * GB).limit_denominator(10**9)
        caps.append(("queue-bandwidth", raw / queue_per_tile))

    stages = [(p.stage_id, p.op_class, p.per_sm_rate) for p in profiles]
    throughput, cta = solve_rates(stages, machine.sm_count, caps)

    binding = "compute"
    for name, value in caps:
        if value == throughput:
            binding = name
            break
    binding_stages = [
        p.stage_id
        for p in profiles
        if p.per_sm_rate is not None and cta[p.stage_id] * p.per_sm_rate == throughput
    ]
    return Allocation(
        sf_id=pipeline.sf_id,
        throughput=throughput,
        cta=cta,
        binding=binding,
        binding_stages=binding_stages,
        profiles=profiles,
    )


def dump_allocations(allocations: list[Allocation]) -> str:
    return json.dumps(
        {"allocations": [a.to_dict() for a in allocations]}, indent=2, sort_keys=True
    )
