import math
import random
from pathlib import Path

import numpy as np
import pytest

from randgraph import random_graph, tight_profile
from vdcore.costmodel import get_profile, scaled
from vdcore.generator import generate, load_program, program_from_assembly
from vdcore.isa import HandlerSpec, HandlerTable, Opcode, OpClass, UopWord
from vdcore.machine import BuildError, barrierize, default_handlers, input_count, run
from vdcore.workload import TensorRef, evaluate, init_inputs, parse_workload

ROOT = Path(__file__).parents[1]
WORKLOADS = ROOT / "src/vdcore/workloads"
FIXTURES = sorted((Path(__file__).parent / "fixtures/deadlock").iterdir())
FOUR = scaled(get_profile("H100"), 4, vcc_per_sm=1)
ONE = scaled(get_profile("H100"), 1, vcc_per_sm=1)
TWO = scaled(get_profile("H100"), 2, vcc_per_sm=1)


def simulate(name, hw=FOUR, seed=0, **kw):
    g = parse_workload((WORKLOADS / f"{name}.yaml").read_text())
    inputs = init_inputs(g, seed)
    p = generate(g, hw)
    if kw.get("barrier"):
        p = barrierize(p)
    return g, inputs, run(p, inputs, seed=seed)


def small(vmc, vccs=None, hw=ONE, rows=16):
    tensors = [TensorRef(n, (rows, 1), (16, 1), init="uniform") for n in "ABCD"]
    tensors.append(TensorRef("M", (rows, rows), (16, 16), init="uniform"))
    texts = {"vmc0": vmc, **(vccs or {})}
    deps = {int(w.split("dep=")[1].split()[0]) for t in texts.values() for w in t.splitlines()
            if "dep=" in w} - {0}
    return program_from_assembly(hw, tensors, texts, "\n".join(f"{d} vmc0 vmc0 4 global" for d in deps))


# -- construction -------------------------------------------------------------

def test_h100_shape():
    hw = get_profile("H100")
    assert (hw.sm_count, hw.vmc_per_sm, hw.vcc_per_sm, hw.slot_size) == (132, 1, 2, 8192)
    assert (hw.ldu_count, hw.stu_count) == (2, 1)
    assert hw.slot_count == min(32, hw.shmem_per_sm // hw.slot_size)


def test_empty_program_completes_at_zero():
    rep = run(small(""))
    assert rep.completed and rep.makespan == 0 and rep.spans == []


def test_core_outside_profile_is_rejected():
    p = program_from_assembly(ONE, [TensorRef("A", (16, 1), (16, 1))],
                              {"vmc3": "LOAD [] dep=0 flow=1 addr=coord(0:0,0) size=1"}, "")
    with pytest.raises(BuildError, match="vmc3"):
        run(p)


# -- timing and ordering ------------------------------------------------------

def test_single_load_occupies_dram_for_its_bytes():
    tensors = [TensorRef("A", (32, 64), (32, 64), init="uniform")]
    p = program_from_assembly(ONE, tensors, {"vmc0": "LOAD [] dep=0 flow=1 addr=coord(0:0,0) size=1"}, "")
    rep = run(p)
    (span,) = rep.spans
    assert span.nbytes == 8192
    assert span.start == ONE.issue_ns
    assert span.end - span.start == math.ceil(8192 / ONE.bytes_per_ns)
    assert sum(b for _, _, b in rep.dram) == pytest.approx(8192)
    assert rep.bytes_read == 8192


def test_independent_load_overtakes_blocked_dependency():
    # vmc1 produces O slowly; vmc0 waits for it on flow 1 while flow 2 streams M
    tensors = [TensorRef("A", (64, 64), (64, 64), init="uniform"), TensorRef("x", (64, 1), (64, 1)),
               TensorRef("O", (64, 1), (64, 1)), TensorRef("M", (16, 64), (16, 64))]
    texts = {
        "vmc1": "LOAD [SEND] dep=0 flow=1 addr=coord(1:0,0) size=1\n"
                "LOAD [SEND] dep=0 flow=2 addr=coord(0:0,0) size=1\n"
                "STORE_DEP [RECV] dep=1 flow=3 addr=coord(2:0,0) size=1",
        "vcc1.0": "MATVEC [] dep=0 flow=0 addr=- size=1",
        "vmc0": "LOAD_DEP [] dep=1 flow=1 addr=coord(2:0,0) size=1\n"
                "LOAD [] dep=0 flow=2 addr=coord(3:0,0) size=1",
    }
    p = program_from_assembly(TWO, tensors, texts, "1 vmc1 vmc0 4 global")
    rep = run(p)
    assert rep.completed
    on0 = {s.name: s for s in rep.spans if s.agent.startswith("vmc0")}
    assert on0["LOAD"].end < on0["LOAD_DEP"].end
    assert on0["LOAD"].pos == 1 and on0["LOAD_DEP"].pos == 0


def test_matvec_handler_pops_pairs_then_result():
    calls = []

    class Spy:
        def __init__(self, ctx):
            self.ctx = ctx

        def pop(self):
            calls.append("pop")
            return self.ctx.pop()

        def pop_out(self):
            calls.append("pop_out")
            return self.ctx.pop_out()

        def recycle(self, e):
            calls.append("recycle")
            self.ctx.recycle(e)

        def push(self, out, data):
            calls.append("push")
            self.ctx.push(out, data)

        def compute(self, flops):
            return self.ctx.compute(flops)

    base = default_handlers()[Opcode.MATVEC].fn
    table = HandlerTable().register(Opcode.MATVEC, HandlerSpec(lambda ctx, u: base(Spy(ctx), u),
                                                               OpClass.COMPUTE, pops_m2c=True,
                                                               pushes_c2m=True))
    vmc = "\n".join(["LOAD [SEND] dep=0 flow=1 addr=coord(0:0,0) size=1",
                     "LOAD [SEND] dep=0 flow=2 addr=coord(4:0,0) size=1",
                     "LOAD [SEND] dep=0 flow=1 addr=coord(1:0,0) size=1",
                     "LOAD [SEND] dep=0 flow=2 addr=coord(4:0,0) size=1",
                     "STORE [RECV] dep=0 flow=3 addr=coord(2:0,0) size=1"])
    p = small(vmc, {"vcc0.0": "MATVEC [] dep=0 flow=0 addr=- size=2"})
    inputs = {"A": np.ones((16, 1)), "B": np.full((16, 1), 2.0), "M": np.eye(16)}
    rep = run(p, inputs, handlers=table)
    assert rep.completed
    assert calls == ["pop", "pop", "recycle", "recycle"] * 2 + ["pop_out", "push"]
    assert np.allclose(rep.tensors["C"], 3.0)


def test_non_finite_input_faults():
    vmc = "LOAD [SEND] dep=0 flow=1 addr=coord(0:0,0) size=1\nSTORE [RECV] dep=0 flow=2 addr=coord(1:0,0) size=1"
    p = small(vmc, {"vcc0.0": "ELEMWISE [] dep=0 flow=0 addr=- size=1 imm=4"})
    a = np.ones((16, 1))
    a[3] = np.nan
    rep = run(p, {"A": a})
    assert rep.status == "fault" and "ELEMWISE" in rep.fault
    assert "fault:" in rep.summary()


@pytest.mark.parametrize("op, size, imm, n", [
    (Opcode.MATVEC, 2, 0, 4), (Opcode.GEMM_TILE, 3, 0, 6), (Opcode.ATTN, 2, 0, 5),
    (Opcode.ELEMWISE, 1, 4, 2), (Opcode.ELEMWISE, 1, 0, 1), (Opcode.EMBED, 2, 0, 2),
])
def test_input_count(op, size, imm, n):
    assert input_count(UopWord(op, size=size, imm=imm)) == n


# -- functional results ------------------------------------------------------

@pytest.mark.parametrize("name", ["fig4_matvec_rope", "mlp", "attention_causal", "embed_rmsnorm"])
def test_functional_result_matches_reference(name):
    g, inputs, rep = simulate(name)
    assert rep.completed
    ref = evaluate(g, inputs)
    for t in g.outputs:
        assert np.allclose(rep.tensors[t], ref[t], rtol=1e-5, atol=1e-5 * np.abs(ref[t]).max())


def test_fig4_fused_program_keeps_intermediate_on_chip():
    _, _, rep = simulate("fig4_matvec_rope")
    assert rep.local_bytes > 0
    assert not any(s.name == "LOAD_DEP" for s in rep.spans)


# -- invariants ---------------------------------------------------------------

def check_ordering(rep):
    by_flow, by_unit = {}, {}
    for s in rep.spans:
        if s.agent.startswith("vmc"):
            by_flow.setdefault((s.sm, s.flow), []).append(s)
        by_unit.setdefault(s.agent, []).append(s)
    for spans in by_flow.values():
        spans.sort(key=lambda s: (s.end, s.pos))
        assert [s.pos for s in spans] == sorted(s.pos for s in spans)
    for spans in by_unit.values():
        spans.sort(key=lambda s: (s.end, s.seq))
        assert [s.seq for s in spans] == sorted(s.seq for s in spans)
    assert all(0 <= s.start <= s.end <= rep.makespan for s in rep.spans)
    assert all(v == 0 for v in rep.leftovers.values())


@pytest.mark.parametrize("name", ["transformer_2layer", "flow_chains", "matvec_rope_pipe8", "mlp"])
def test_flow_and_unit_order(name):
    _, _, rep = simulate(name)
    assert rep.completed
    check_ordering(rep)


def test_traffic_matches_program():
    g = parse_workload((WORKLOADS / "mlp.yaml").read_text())
    p = generate(g, FOUR)
    rep = run(p)
    assert rep.traffic == p.global_traffic()


def test_report_is_deterministic():
    a = simulate("transformer_2layer")[2]
    b = simulate("transformer_2layer")[2]
    assert a.to_json() == b.to_json()
    assert a.chrome_trace() == b.chrome_trace()


@pytest.mark.parametrize("seed", range(40))
def test_generated_programs_never_deadlock(seed):
    rng = random.Random(seed)
    g = random_graph(rng)
    rep = run(generate(g, tight_profile(rng)), seed=seed)
    assert rep.completed, rep.wait_for
    check_ordering(rep)


# -- barriers -----------------------------------------------------------------

def test_barrier_never_helps_fig4():
    assert simulate("fig4_matvec_rope", barrier=True)[2].makespan >= simulate("fig4_matvec_rope")[2].makespan


def test_barrier_is_free_for_one_operator():
    assert simulate("rmsnorm", barrier=True)[2].makespan == simulate("rmsnorm")[2].makespan


def test_barrier_orders_operators():
    _, _, rep = simulate("matvec_rope_pipe8", hw=TWO, barrier=True)
    last_matvec = max(s.end for s in rep.spans if s.tag == 0)
    assert min(s.start for s in rep.spans if s.tag == 1 and s.agent.startswith("vmc")) >= last_matvec - 1


# -- deadlock fixtures ----------------------------------------------------------

CYCLES = {
    "01_two_vmc_ring": {"vcc0.0", "vmc0.flow1", "vmc1.flow2", "vcc1.0", "vmc1.flow1", "vmc0.flow2"},
    "02_ring_same_flow": {"vmc0.flow1", "vmc1.flow1"},
    "03_three_vmc_ring": {"vmc0.flow1", "vmc1.flow1", "vmc2.flow1"},
    "04_slot_exhaustion": {"vcc0.0", "vmc0.cfu"},
    "05_local_before_producer": {"vcc0.0", "vmc0.flow1", "vmc0.flow2"},
    "06_signal_ring": {"vmc0.flow1", "vmc1.flow1"},
    "07_self_dependency": {"vcc0.0", "vmc0.flow1", "vmc0.flow3"},
    "08_barrier_inversion": {"vmc0.flow1", "vmc1.cfu"},
    "09_two_lane_slots": {"vcc0.0", "vmc0.cfu"},
    "10_slot_and_dep": {"vmc0.flow1", "vmc1.flow1", "vmc0.cfu"},
}


def is_true_cycle(rep):
    cyc = rep.wait_for
    if not cyc:
        return False
    agents = [a for a, _, _ in cyc]
    closes = all(cyc[i][2] == cyc[(i + 1) % len(cyc)][0] for i in range(len(cyc)))
    return closes and len(set(agents)) == len(agents) and all(
        rep.blocked.get(a, "idle") != "idle" for a in agents if not a.endswith("cfu"))


@pytest.mark.parametrize("path", FIXTURES, ids=lambda p: p.name)
def test_fixture_reports_its_cycle(path):
    rep = run(load_program(path))
    assert rep.status == "deadlock"
    assert is_true_cycle(rep)
    assert {a for a, _, _ in rep.wait_for} == CYCLES[path.name]
