"""Allocator: stage profiling and the exact max-min SM split."""

from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from kitsune import BalanceError, builtin_graph
from kitsune.balance import profile_pipeline, solve_allocation, solve_rates
from kitsune.graph import OpClass
from kitsune.machine import MachineConfig, load_machine
from kitsune.patterns import select
from kitsune.pipeline import build_pipeline

from oracles import brute_force_best

T = OpClass.TENSOR
S = OpClass.SIMT


def _pipeline(name, **params):
    g = builtin_graph(name, **params)
    sel = select(g)
    return build_pipeline(g, sel.sf_nodes[0])


# ---------------------------------------------------------------------------
# solve_rates on hand-checked instances
# ---------------------------------------------------------------------------


def test_two_stage_worked_example():
    # per-SM rates 1/400 and 1/1200 tiles per unit time, 4 SMs: granting the
    # slow stage three SMs balances it against the fast stage's single SM
    stages = [("fast", T, Fraction(1, 400)), ("slow", T, Fraction(1, 1200))]
    thrpt, alloc = solve_rates(stages, 4)
    assert thrpt == Fraction(1, 400)
    assert alloc == {"fast": 1, "slow": 3}


def test_classes_are_allocated_independently():
    stages = [
        ("g1", T, Fraction(1, 100)),
        ("g2", T, Fraction(1, 100)),
        ("e1", S, Fraction(1, 50)),
    ]
    thrpt, alloc = solve_rates(stages, 4)
    # SIMT class has one stage: it receives all four SMs
    assert alloc["e1"] == 4
    assert alloc["g1"] + alloc["g2"] == 4
    assert thrpt == min(Fraction(alloc["g1"], 100), Fraction(alloc["g2"], 100), Fraction(4, 50))


def test_cap_binds_below_compute():
    stages = [("a", T, Fraction(10))]
    thrpt, alloc = solve_rates(stages, 4, caps=[("dram-bandwidth", Fraction(7))])
    assert thrpt == Fraction(7)
    assert alloc == {"a": 4}


def test_unrated_stage_gets_one_sm_minimum():
    stages = [("a", T, Fraction(1)), ("z", T, None)]
    thrpt, alloc = solve_rates(stages, 4)
    # the zero-flop stage holds one SM; the rated stage gets the rest
    assert alloc["a"] + alloc["z"] == 4
    assert alloc["z"] >= 1
    assert thrpt == Fraction(alloc["a"], 1) / 1


def test_infeasible_when_stages_exceed_sms():
    stages = [(f"s{i}", T, Fraction(1)) for i in range(5)]
    with pytest.raises(BalanceError, match="TENSOR class needs 5 stages"):
        solve_rates(stages, 4)


def test_unbounded_without_rates_or_caps():
    with pytest.raises(BalanceError, match="unbounded"):
        solve_rates([("a", T, None)], 4)


def test_exactness_no_float_drift():
    # rates chosen so float math would tie incorrectly
    k = Fraction(1, 3)
    stages = [("a", T, k), ("b", T, k)]
    thrpt, alloc = solve_rates(stages, 7)
    assert thrpt == 3 * k  # (3,4) or (4,3); min is 3/3 = 1
    assert sorted(alloc.values()) == [3, 4]


# ---------------------------------------------------------------------------
# randomized cross-check against the brute-force oracle
# ---------------------------------------------------------------------------


@st.composite
def _instances(draw):
    sm = draw(st.integers(min_value=1, max_value=8))
    n = draw(st.integers(min_value=1, max_value=4))
    stages = []
    for i in range(n):
        cls = draw(st.sampled_from([T, S]))
        if draw(st.booleans()):
            rate = Fraction(draw(st.integers(1, 12)), draw(st.integers(1, 12)))
        else:
            rate = None
        stages.append((f"s{i}", cls, rate))
    caps = []
    if draw(st.booleans()):
        caps.append(("dram-bandwidth", Fraction(draw(st.integers(1, 40)), draw(st.integers(1, 4)))))
    return stages, sm, caps


@given(inst=_instances())
@settings(max_examples=200, deadline=None)
def test_solver_matches_brute_force(inst):
    stages, sm, caps = inst
    expected = brute_force_best(stages, sm, caps)
    if expected is None:
        with pytest.raises(BalanceError):
            solve_rates(stages, sm, caps)
        return
    thrpt, alloc = solve_rates(stages, sm, caps)
    assert thrpt == expected
    # the returned allocation really achieves the optimum
    by_class: dict[OpClass, int] = {}
    for sid, cls, rate in stages:
        by_class[cls] = by_class.get(cls, 0) + alloc[sid]
        if rate is not None:
            assert alloc[sid] * rate >= thrpt
    for cls, total in by_class.items():
        assert total == sm


# ---------------------------------------------------------------------------
# profiling and full-pipeline allocation
# ---------------------------------------------------------------------------


def test_mlp_profile_values():
    p = _pipeline("mlp-wide-hidden")
    machine = MachineConfig()
    profiles = {pr.stage_id: pr for pr in profile_pipeline(p, machine)}
    fc1 = profiles["fc1"]
    assert fc1.flops_per_tile == Fraction(2 * 16384 * 256 * 1024 + 16384 * 1024, 256)
    assert fc1.dram_bytes_per_tile == Fraction(16384 * 256 * 2 + 256 * 1024 * 2, 256)
    assert fc1.queue_bytes_per_tile == 128 * 1024  # one payload written per tile
    assert fc1.util == 1  # compute-bound on the full machine
    assert fc1.speedup == 1
    fc2 = profiles["fc2"]
    assert fc2.queue_bytes_per_tile == 128 * 1024  # read back by the consumer


def test_memory_bound_stage_has_speedup_above_one():
    p = _pipeline("mgn-mlp")
    machine = MachineConfig()
    profiles = {pr.stage_id: pr for pr in profile_pipeline(p, machine)}
    norm = profiles["norm"]  # tiny flops, full output write
    assert norm.util < 1
    assert norm.speedup > 1
    assert norm.speedup == 1 / norm.util


def test_mlp_allocation_between_two_gemm_stages():
    p = _pipeline("mlp-wide-hidden")
    machine = MachineConfig()
    alloc = solve_allocation(p, machine)
    assert alloc.cta["fc1"] + alloc.cta["fc2"] == 108
    assert abs(alloc.cta["fc1"] - 54) <= 1
    assert alloc.binding == "compute"
    # brute force over every two-way split confirms the optimum
    profiles = {pr.stage_id: pr for pr in profile_pipeline(p, machine)}
    best = max(
        min(a * profiles["fc1"].per_sm_rate, (108 - a) * profiles["fc2"].per_sm_rate)
        for a in range(1, 108)
    )
    assert alloc.throughput == best


def test_nerf_allocation_fills_both_classes():
    p = _pipeline("nerf-chain")
    machine = MachineConfig()
    alloc = solve_allocation(p, machine)
    tensor_total = sum(
        alloc.cta[s.id] for s in p.stages if s.op_class is OpClass.TENSOR
    )
    simt_total = sum(alloc.cta[s.id] for s in p.stages if s.op_class is OpClass.SIMT)
    assert tensor_total == 108
    assert simt_total == 108  # the lone concat stage owns the SIMT slots
    assert alloc.binding_stages  # something pins the throughput
    assert all(a >= 1 for a in alloc.cta.values())


def test_splitk_tree_allocation_is_feasible():
    p = _pipeline("splitk-reduce")
    alloc = solve_allocation(p, MachineConfig())
    simt_stages = [s.id for s in p.stages if s.op_class is OpClass.SIMT]
    assert sum(alloc.cta[s] for s in simt_stages) == 108
    assert len(simt_stages) == 7  # 6 tree combiners + final sum


def test_allocation_dict_shape():
    p = _pipeline("mlp-wide-hidden")
    doc = solve_allocation(p, MachineConfig()).to_dict()
    assert set(doc) >= {"sf_id", "throughput_tiles_per_s", "throughput_exact", "cta", "binding", "stages"}
    num, den = doc["throughput_exact"].split("/")
    assert int(num) > 0 and int(den) > 0


def test_profiles_on_bigger_machine_shift_binding():
    p = _pipeline("mlp-wide-hidden")
    big = load_machine("a100-2x-sm-l2")
    small = load_machine("a100")
    thr_small = solve_allocation(p, small).throughput
    thr_big = solve_allocation(p, big).throughput
    assert thr_big > thr_small  # doubled compute must raise a compute-bound pipeline
