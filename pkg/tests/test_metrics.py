import csv
import io
from pathlib import Path

import pytest

from vdcore.costmodel import get_profile, scaled
from vdcore.generator import (GenerateOptions, generate, load_program, program_from_assembly,
                              select_tilings)
from vdcore.machine import barrierize, run
from vdcore.metrics import MetricsError, compare, dram_bytes, timelines_csv, utilization
from vdcore.workload import TensorRef, init_inputs, parse_workload, work_items

ROOT = Path(__file__).parents[1]
WORKLOADS = ROOT / "src/vdcore/workloads"
ONE = scaled(get_profile("H100"), 1, vcc_per_sm=1)
TWO = scaled(get_profile("H100"), 2, vcc_per_sm=1)
FOUR = scaled(get_profile("H100"), 4, vcc_per_sm=1)


def simulate(name, hw=FOUR, **opts):
    g = parse_workload((WORKLOADS / f"{name}.yaml").read_text())
    barrier = opts.pop("barrier", False)
    p = generate(g, hw, GenerateOptions(**opts))
    return run(barrierize(p) if barrier else p, init_inputs(g, 0))


def load_chain(n, hw=ONE):
    tensors = [TensorRef("A", (32 * n, 64), (32, 64), init="uniform")]
    vmc = "\n".join(f"LOAD [] dep=0 flow={1 + i % 2} addr=coord(0:{i},0) size=1" for i in range(n))
    return run(program_from_assembly(hw, tensors, {"vmc0": vmc}, ""))


def test_single_load_lands_in_one_dram_bucket():
    rep = load_chain(1)
    dram = utilization(rep, bucket=rep.makespan)[0]
    assert dram.resource == "dram"
    assert [f > 0 for _, _, f in dram.buckets] == [True]
    fine = utilization(rep, bucket=1000)[0]
    assert sum(f > 0 for _, _, f in fine.buckets) == 1


def test_buckets_tile_the_run():
    rep = simulate("mlp")
    for tl in utilization(rep):
        assert tl.buckets[0][0] == 0 and tl.buckets[-1][1] == rep.makespan
        assert all(a[1] == b[0] for a, b in zip(tl.buckets, tl.buckets[1:]))
        assert all(0.0 <= f <= 1.0 for _, _, f in tl.buckets)


def test_default_bucket_is_a_two_hundredth():
    rep = simulate("transformer_2layer")
    dram = utilization(rep)[0]
    assert len(dram.buckets) == 200
    assert dram.buckets[0][1] == -(-rep.makespan // 200)


@pytest.mark.parametrize("name", ["mlp", "fig4_matvec_rope", "attention_2h64"])
@pytest.mark.parametrize("bucket", [None, 7, 64])
def test_dram_bytes_are_conserved(name, bucket):
    rep = simulate(name)
    moved = dram_bytes(utilization(rep, bucket)[0], rep.bandwidth)
    assert moved == pytest.approx(rep.traffic, rel=1e-9)


def test_saturating_load_chain_fills_every_bucket():
    # independent loads on two units keep the VMC's bandwidth share busy;
    # buckets wider than ten issue intervals hide the first issue
    rep = load_chain(24)
    assert 24 * 8192 / ONE.bytes_per_ns / rep.makespan > 0.99
    dram = utilization(rep, bucket=rep.makespan // 8)[0]
    assert min(f for _, _, f in dram.buckets) >= 0.9


def test_deadlocked_report_refused():
    rep = run(load_program(ROOT / "tests/fixtures/deadlock/01_two_vmc_ring"))
    with pytest.raises(MetricsError, match="deadlock"):
        utilization(rep)


def test_bad_bucket_width():
    with pytest.raises(MetricsError, match="bucket"):
        utilization(load_chain(1), bucket=0.5)


def test_timelines_csv_columns():
    rows = list(csv.reader(io.StringIO(timelines_csv(utilization(load_chain(2), bucket=100)))))
    assert rows[0] == ["resource", "start", "end", "fraction"]
    assert {r[0] for r in rows[1:]} >= {"dram", "vmc0.ldu0", "vmc0.ldu1"}


# -- comparison ---------------------------------------------------------------

def test_identical_reports_compare_even():
    a = simulate("fig4_matvec_rope")
    c = compare(a, a)
    assert c.makespan_ratio == 1.0 and c.traffic_delta == 0 and c.local_delta == 0
    assert all(v == 0 for v in c.utilization_delta.values())


def test_ratio_is_antisymmetric():
    a, b = simulate("matvec_rope_pipe8", TWO), simulate("matvec_rope_pipe8", TWO, barrier=True)
    assert compare(a, b).makespan_ratio * compare(b, a).makespan_ratio == pytest.approx(1.0)
    assert compare(a, b).traffic_delta == -compare(b, a).traffic_delta


def test_overlap_beats_barrier_on_pipeline():
    c = compare(simulate("matvec_rope_pipe8", TWO), simulate("matvec_rope_pipe8", TWO, barrier=True))
    assert c.makespan_ratio < 1
    assert c.traffic_delta == 0
    assert c.utilization_delta["dram"] > 0


def test_mismatched_workloads_rejected():
    with pytest.raises(MetricsError, match="different workloads"):
        compare(simulate("fig4_matvec_rope"), simulate("rmsnorm"))


def test_mismatched_profiles_rejected():
    with pytest.raises(MetricsError, match="different profiles"):
        compare(simulate("fig4_matvec_rope"), simulate("fig4_matvec_rope", TWO))


def fusible_bytes(g, tilings, hw):
    """Bytes an oracle expects fusion to keep on chip.

    A produced tile stays local when it is not a graph output, exactly one
    consumer item loads it, and that item runs on the producer's SM.
    """
    sm_of = {}
    for n in g.nodes:
        for it, pair in zip(work_items(n, g), tilings[n.id].assignment):
            sm_of[it.out] = hw.pair_location(pair)[0]
    loads = {}
    for n in g.nodes:
        for it, pair in zip(work_items(n, g), tilings[n.id].assignment):
            for tile in it.inputs:
                loads.setdefault(tile, []).append(hw.pair_location(pair)[0])
    total = 0
    for tile, sm in sm_of.items():
        if tile[0] not in g.outputs and loads.get(tile) == [sm]:
            total += g.tensors[tile[0]].tile_bytes
    return total


def test_fused_mlp_saves_store_and_load_of_each_local_tile():
    g = parse_workload((WORKLOADS / "mlp.yaml").read_text())
    t = select_tilings(g, FOUR)
    fused = run(generate(g, FOUR, GenerateOptions(tilings=t)), init_inputs(g, 0))
    unfused = simulate("mlp", fusion=False)
    expect = fusible_bytes(g, t, FOUR)
    assert expect > 0
    c = compare(fused, unfused)
    assert c.traffic_delta == -2 * expect
    assert c.local_delta == expect          # one on-chip hand-off per tile


# -- barrier trough -------------------------------------------------------------

def boundary_fraction(rep):
    boundary = max(s.end for s in rep.spans if s.tag == 0)
    dram = utilization(rep)[0]
    fractions = [f for _, _, f in dram.buckets]
    return dram.fraction_at(boundary), sum(fractions) / len(fractions)


def test_barrier_leaves_a_trough_at_the_operator_boundary():
    at_barrier, mean = boundary_fraction(simulate("matvec_rope_pipe8", TWO, barrier=True))
    assert at_barrier < mean
    overlapped, _ = boundary_fraction(simulate("matvec_rope_pipe8", TWO))
    assert overlapped >= at_barrier
