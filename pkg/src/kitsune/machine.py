"""Machine descriptions: compute peaks, memory system, queue calibration.

Bandwidths are stored in GB/s (1e9 bytes per second).  The per-lane queue
bandwidth table is a piecewise-linear curve over payload size, calibrated so
a single producer CTA moves ~37 GB/s through one queue at 128-256 KiB
payloads, an order of magnitude less at 1 KiB payloads (sequence-number
atomics dominate small transfers), and somewhat less again once payloads
outgrow the L2 slices they are pinned to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from kitsune.errors import KitsuneError

GB = 1_000_000_000

_DEFAULT_LANE_TABLE: list[tuple[int, float]] = [
    (1_024, 3.1),
    (4_096, 9.0),
    (16_384, 20.0),
    (65_536, 30.0),
    (131_072, 37.0),
    (262_144, 37.0),
    (524_288, 27.8),
]


@dataclass
class MachineConfig:
    name: str = "a100"
    sm_count: int = 108
    clock_ghz: float = 1.4
    tensor_tflops: float = 312.0  # machine-wide fp16 tensor-pipe peak
    simt_tflops: float = 19.5  # machine-wide fp32 SIMT peak
    dram_gbps: float = 1500.0
    l2_to_dram_ratio: float = 3.0
    l2_capacity_bytes: int = 40 * 1024 * 1024
    smem_per_sm_bytes: int = 192 * 1024
    dram_latency_cycles: int = 572
    atomics_per_s: float = 100e6  # per-CTA rate limit on queue sequence atomics
    poll_interval_ns: float = 200.0  # blocked stages re-check queue state at this cadence
    aggregate_queue_gbps: float = 2000.0  # payload delivered across all queues
    lane_gbps_table: list[tuple[int, float]] = field(
        default_factory=lambda: [tuple(row) for row in _DEFAULT_LANE_TABLE]
    )

    # -- derived -----------------------------------------------------------
    @property
    def l2_gbps(self) -> float:
        return self.dram_gbps * self.l2_to_dram_ratio

    @property
    def tensor_tflops_per_sm(self) -> float:
        return self.tensor_tflops / self.sm_count

    @property
    def simt_tflops_per_sm(self) -> float:
        return self.simt_tflops / self.sm_count

    @property
    def clock_hz(self) -> float:
        return self.clock_ghz * 1e9

    @property
    def dram_latency_s(self) -> float:
        return self.dram_latency_cycles / self.clock_hz

    def pipe_flops_per_s(self, op_class) -> float:
        from kitsune.graph import OpClass

        peak = self.tensor_tflops if op_class is OpClass.TENSOR else self.simt_tflops
        return peak * 1e12

    def pipe_flops_per_sm_s(self, op_class) -> float:
        return self.pipe_flops_per_s(op_class) / self.sm_count

    def lane_gbps(self, payload_bytes: int) -> float:
        """Per-lane queue bandwidth at a payload size (piecewise linear)."""

        table = self.lane_gbps_table
        if payload_bytes <= table[0][0]:
            return table[0][1]
        for (x0, y0), (x1, y1) in zip(table, table[1:]):
            if payload_bytes <= x1:
                frac = (payload_bytes - x0) / (x1 - x0)
                return y0 + frac * (y1 - y0)
        return table[-1][1]

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "sm_count": self.sm_count,
            "clock_ghz": self.clock_ghz,
            "tensor_tflops": self.tensor_tflops,
            "simt_tflops": self.simt_tflops,
            "dram_gbps": self.dram_gbps,
            "l2_to_dram_ratio": self.l2_to_dram_ratio,
            "l2_capacity_bytes": self.l2_capacity_bytes,
            "smem_per_sm_bytes": self.smem_per_sm_bytes,
            "dram_latency_cycles": self.dram_latency_cycles,
            "atomics_per_s": self.atomics_per_s,
            "poll_interval_ns": self.poll_interval_ns,
            "aggregate_queue_gbps": self.aggregate_queue_gbps,
            "lane_gbps_table": [list(row) for row in self.lane_gbps_table],
        }

    @staticmethod
    def from_dict(data: dict) -> "MachineConfig":
        cfg = MachineConfig()
        known = set(cfg.to_dict())
        unknown = set(data) - known
        if unknown:
            raise KitsuneError(f"unknown machine config keys: {sorted(unknown)}")
        for key, value in data.items():
            if key == "lane_gbps_table":
                rows = []
                for row in value:
                    if len(row) != 2 or row[0] <= 0 or row[1] <= 0:
                        raise KitsuneError(f"bad lane_gbps_table row: {row!r}")
                    rows.append((int(row[0]), float(row[1])))
                if rows != sorted(rows):
                    raise KitsuneError("lane_gbps_table must be sorted by payload size")
                cfg.lane_gbps_table = rows
            else:
                setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        positive = (
            "sm_count clock_ghz tensor_tflops simt_tflops dram_gbps l2_to_dram_ratio "
            "l2_capacity_bytes smem_per_sm_bytes dram_latency_cycles atomics_per_s "
            "poll_interval_ns aggregate_queue_gbps"
        ).split()
        for key in positive:
            if getattr(self, key) <= 0:
                raise KitsuneError(f"machine config '{key}' must be positive")
        if not self.lane_gbps_table:
            raise KitsuneError("lane_gbps_table must not be empty")


def _a100() -> MachineConfig:
    return MachineConfig()


def _a100_2x_sm_l2() -> MachineConfig:
    # twice the SMs (so twice the machine compute) and twice the L2-side
    # bandwidth; DRAM bandwidth and capacities unchanged
    return MachineConfig(
        name="a100-2x-sm-l2",
        sm_count=216,
        tensor_tflops=624.0,
        simt_tflops=39.0,
        l2_to_dram_ratio=6.0,
        aggregate_queue_gbps=4000.0,
    )


PRESETS = {
    "a100": _a100,
    "a100-2x-sm-l2": _a100_2x_sm_l2,
}


def load_machine(source: str | None) -> MachineConfig:
    """Resolve a preset name or a JSON config path; None means 'a100'."""

    if source is None or source == "":
        return PRESETS["a100"]()
    if source in PRESETS:
        return PRESETS[source]()
    try:
        with open(source, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        known = ", ".join(sorted(PRESETS))
        raise KitsuneError(f"machine '{source}' is neither a preset ({known}) nor a readable file")
    except json.JSONDecodeError as exc:
        raise KitsuneError(f"machine config {source}: invalid JSON: {exc.msg} (line {exc.lineno})")
    return MachineConfig.from_dict(data)
