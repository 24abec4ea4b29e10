import math
from pathlib import Path

import pytest

from vdcore.costmodel import (KB, HardwareProfile, ProfileError, builtin_profiles, dump_profile,
                              get_profile, load_profile, profile_from_dict, scaled, uop_latency)
from vdcore.generator import GenerateOptions, estimate, generate, select_tilings
from vdcore.isa import Coord, Opcode, UopWord
from vdcore.machine import run
from vdcore.workload import parse_workload

ROOT = Path(__file__).parents[1] / "src/vdcore"
H100 = get_profile("H100")
ONE = scaled(H100, 1, vcc_per_sm=1)


def test_builtin_profiles_match_hardware_table():
    got = {p.name: (p.sm_count, p.shmem_per_sm, p.dram_bw) for p in builtin_profiles()}
    assert got == {
        "H100": (132, 228 * KB, 3.35e12),
        "GH200": (132, 228 * KB, 4.00e12),
        "RTX6000 Pro": (188, 100 * KB, 960e9),
    }
    assert all((p.vmc_per_sm, p.vcc_per_sm, p.slot_size) == (1, 2, 8 * KB) for p in builtin_profiles())


def test_lookup_ignores_case_and_spaces():
    assert get_profile("rtx6000pro").sm_count == 188
    with pytest.raises(ProfileError, match="unknown"):
        get_profile("A100")


@pytest.mark.parametrize("field", ["sm_count", "dram_bw", "issue_ns"])
def test_non_positive_fields_rejected(field):
    with pytest.raises(ProfileError, match=field):
        HardwareProfile(**{**H100.to_dict(), field: 0})


def test_slot_count_bounded_by_shared_memory_and_vector():
    assert H100.slot_count == 28
    assert get_profile("RTX6000 Pro").slot_count == 12
    assert scaled(H100, 1, shmem_per_sm=1024 * KB).slot_count == 32
    with pytest.raises(ProfileError, match="slot_size"):
        scaled(H100, 1, shmem_per_sm=4 * KB)


def test_scaled_keeps_per_sm_bandwidth():
    s = scaled(H100, 4)
    assert s.sm_count == 4
    assert s.dram_bw / s.sm_count == pytest.approx(H100.dram_bw / H100.sm_count)


@pytest.mark.parametrize("p", builtin_profiles(), ids=lambda p: p.name)
def test_profile_file_round_trip(p, tmp_path):
    path = tmp_path / "p.yaml"
    path.write_text(dump_profile(p))
    assert load_profile(path) == p


@pytest.mark.parametrize("path", sorted((ROOT / "profiles").glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_profiles_load(path):
    p = load_profile(path)
    assert p.sm_count <= H100.sm_count and p.slot_size == H100.slot_size


def test_unknown_profile_field_rejected():
    with pytest.raises(ProfileError, match="warp_size"):
        profile_from_dict({**H100.to_dict(), "warp_size": 32})


def test_missing_profile_file():
    with pytest.raises(ProfileError, match="not found"):
        load_profile("/nonexistent/p.yaml")


# -- latency -------------------------------------------------------------------

LOAD = UopWord(Opcode.LOAD, flow=1, address=Coord(0, (0, 0)), size=1)


def test_load_latency_is_issue_plus_transfer():
    assert uop_latency(LOAD, H100, nbytes=8192) == H100.issue_ns + math.ceil(8192 / 3.35e12 * 1e9)
    assert uop_latency(LOAD, H100, nbytes=8192) == 22 + 3


def test_bandwidth_share_splits_between_vmcs():
    four = uop_latency(LOAD, H100, nbytes=8192, active_vmcs=4)
    assert four == H100.issue_ns + math.ceil(4 * 8192 / 3.35e12 * 1e9)


def test_dependent_transfer_pays_a_queue_operation():
    dep = UopWord(Opcode.LOAD_DEP, dep_id=1, flow=1, address=Coord(0, (0, 0)), size=1)
    assert uop_latency(dep, H100, nbytes=8192) - uop_latency(LOAD, H100, nbytes=8192) == H100.queue_op_ns


def test_loop_header_costs_issue_only():
    assert uop_latency(UopWord(Opcode.LOOP, imm=8), H100) == H100.issue_ns
    assert uop_latency(UopWord(Opcode.REPEAT), H100, nbytes=1 << 20, flops=1e9) == H100.issue_ns


def test_matvec_latency_is_issue_plus_flops():
    assert uop_latency(UopWord(Opcode.MATVEC, size=1), H100, flops=4096) == (
        H100.issue_ns + math.ceil(4096 / H100.eu_flops * 1e9))


@pytest.mark.parametrize("u", [LOAD, UopWord(Opcode.MATVEC, size=1)], ids=["memory", "compute"])
def test_latency_monotone(u):
    costs = [uop_latency(u, H100, nbytes=b, flops=b) for b in range(0, 1 << 17, 997)]
    assert costs == sorted(costs)


# -- estimate vs. simulation ----------------------------------------------------

SINGLE = [p.stem for p in sorted((ROOT / "workloads").glob("*.yaml")) if p.stem != "layers32"]


@pytest.mark.parametrize("name", SINGLE)
def test_estimate_agrees_with_machine_on_one_flow(name):
    # one VMC, one compute core, flows and fusion off: no overlap beyond the issue pipeline
    g = parse_workload((ROOT / "workloads" / f"{name}.yaml").read_text())
    t = select_tilings(g, ONE)
    est = estimate(g, t, ONE).makespan
    p = generate(g, ONE, GenerateOptions(tilings=t, flows=False, fusion=False))
    got = run(p).makespan
    assert abs(got - est) <= 0.25 * got
