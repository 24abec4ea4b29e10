import itertools
import random
from pathlib import Path

import networkx as nx
import pytest

from randgraph import random_graph, tight_profile
from vdcore.costmodel import get_profile, scaled
from vdcore.generator import (DeadlockError, GenerateOptions, allocation_model, apply_dynamic_fusion,
                              assign_virtual_flows, eliminate_redundant_dependencies, estimate,
                              fix_deadlocks, fold_loops, generate, lower, program_from_assembly,
                              select_tilings, unfold_program, verify_certificate)
from vdcore.isa import STORES, Flag, Opcode, OpClass
from vdcore.machine import run
from vdcore.workload import TensorRef, decompositions, parse_workload, work_items

WORKLOADS = Path(__file__).parents[1] / "src/vdcore/workloads"
FOUR = scaled(get_profile("H100"), 4, vcc_per_sm=1)
ONE = scaled(get_profile("H100"), 1, vcc_per_sm=1)
FIG4 = parse_workload((WORKLOADS / "fig4_matvec_rope.yaml").read_text())

MATVEC = parse_workload("""
tensors:
  - {name: M, shape: [64, 64], tile: [16, 64]}
  - {name: N, shape: [64, 1], tile: [64, 1]}
  - {name: O, shape: [64, 1], tile: [16, 1]}
operators:
  - {id: mv, kind: MATVEC, inputs: [M, N], outputs: [O]}
""")


def names(words):
    return [Opcode(u.opcode).name for u in words]


# -- tiling ------------------------------------------------------------------

def test_matvec_tiling_is_oracle_optimal():
    chosen = select_tilings(MATVEC, FOUR, theta=1.2)
    best = min(estimate(MATVEC, {"mv": c}, FOUR).makespan for c in decompositions(MATVEC.nodes[0], MATVEC, FOUR))
    got = estimate(MATVEC, chosen, FOUR).makespan
    assert got <= best * 1.01
    assert chosen["mv"].splits == (("M", 4),)


def test_single_pair_has_one_choice():
    chosen = select_tilings(MATVEC, ONE)
    assert chosen["mv"].assignment == (0, 0, 0, 0)


def test_chain_tiling_makes_edges_one_to_one():
    chosen = select_tilings(FIG4, FOUR)
    assert chosen["matvec"].parts == 4 and chosen["rope"].parts == 4
    made_on = {it.out: pair for it, pair in zip(work_items(FIG4.node("matvec"), FIG4),
                                                chosen["matvec"].assignment)}
    for it, pair in zip(work_items(FIG4.node("rope"), FIG4), chosen["rope"].assignment):
        for tile in it.inputs:
            if tile in made_on:
                assert made_on[tile] == pair


def test_chain_tiling_oracle():
    # exhaustive over both operators' catalogs
    nodes = FIG4.nodes
    cats = [decompositions(n, FIG4, FOUR) for n in nodes]
    best = min(estimate(FIG4, {n.id: c for n, c in zip(nodes, combo)}, FOUR).makespan
               for combo in itertools.product(*cats))
    assert estimate(FIG4, select_tilings(FIG4, FOUR), FOUR).makespan <= best * 1.01


def test_tiling_is_deterministic():
    g = parse_workload((WORKLOADS / "transformer_2layer.yaml").read_text())
    assert select_tilings(g, FOUR) == select_tilings(g, FOUR)


# -- lowering ----------------------------------------------------------------

def test_fig4_lowering_per_pair():
    p = lower(FIG4, select_tilings(FIG4, FOUR), FOUR)
    p.check()
    o, r = p.tensor_id("O"), p.tensor_id("R")
    for k in range(4):
        s = p.streams[f"vmc{k}"]
        assert names(s) == ["LOAD", "LOAD", "STORE_DEP", "LOAD", "LOAD_DEP", "STORE"]
        assert [u.address.tensor for u in s] == [p.tensor_id(t) for t in "NMOTOR"]
        assert all(u.address.coord[0] == k for u in s if u.address.tensor in (o, r))
        assert s[2].dep_id == s[4].dep_id != 0
        assert all(Flag.SEND in Flag(u.flags) for u in s if u.opcode not in STORES)
        assert all(Flag.RECV in Flag(u.flags) for u in s if u.opcode in STORES)
        assert names(p.streams[f"vcc{k}.0"]) == ["MATVEC", "ROPE"]
        q = p.queues[s[2].dep_id]
        assert q.producer == q.consumer == f"vmc{k}"


def test_empty_graph_lowers_to_nothing():
    p = lower(parse_workload("operators: []\n"), {}, FOUR)
    assert all(s == [] for s in p.streams.values())
    assert p.queues == {}


def test_k_split_matvec_packs_two_tiles():
    g = parse_workload("""
tensors:
  - {name: M, shape: [16, 64], tile: [16, 32]}
  - {name: N, shape: [64, 1], tile: [32, 1]}
  - {name: O, shape: [16, 1], tile: [16, 1]}
operators:
  - {id: mv, kind: MATVEC, inputs: [M, N], outputs: [O]}
""")
    p = lower(g, select_tilings(g, ONE), ONE)
    assert names(p.streams["vmc0"]) == ["LOAD"] * 4 + ["STORE"]
    mv = p.streams["vcc0.0"]
    assert names(mv) == ["MATVEC"] and mv[0].size == 2


def test_lowering_is_bit_identical():
    g = parse_workload((WORKLOADS / "mlp.yaml").read_text())
    assert generate(g, FOUR).fingerprint() == generate(g, FOUR).fingerprint()


# -- virtual flows -----------------------------------------------------------

def asm_program(vmc: str, vcc: str = "", slots: int = 8, lanes: int = 1, vcc1: str = "", rows: int = 16):
    hw = scaled(get_profile("H100"), 1, vcc_per_sm=lanes, slot_size=64, shmem_per_sm=slots * 64, name="t")
    tensors = [TensorRef(f"t{i}", (rows, 1), (16, 1), init="uniform") for i in range(16)]
    texts = {"vmc0": vmc, "vcc0.0": vcc}
    if lanes > 1:
        texts["vcc0.1"] = vcc1
    queues = "\n".join(f"{d} vmc0 vmc0 4 global" for d in sorted(
        {int(w.split("dep=")[1].split()[0]) for w in vmc.splitlines() if "dep=" in w} - {0}))
    return program_from_assembly(hw, tensors, texts, queues)


def flow_oracle(p, core):
    """Connected components of same-core dependencies and same-tile write conflicts."""
    g = nx.Graph()
    inst = [(i, u) for i, u, _ in p.instances(core) if u.op_class is OpClass.MEMORY]
    g.add_nodes_from(i for i, _ in inst)
    prod = {u.dep_id: i for i, u in inst if u.dep_id and u.opcode in STORES}
    for i, u in inst:
        if u.dep_id and u.opcode not in STORES and u.dep_id in prod:
            g.add_edge(prod[u.dep_id], i)
    for (i, u), (j, w) in itertools.combinations(inst, 2):
        if u.address == w.address and (u.opcode in STORES or w.opcode in STORES):
            g.add_edge(i, j)
    return {frozenset(c) for c in nx.connected_components(g)}


def flow_partition(p, core):
    groups: dict = {}
    for i, u in enumerate(p.streams[core]):
        if u.op_class is OpClass.MEMORY:
            groups.setdefault(u.flow, set()).add(i)
    return {frozenset(s) for s in groups.values()}


def test_serial_chain_gets_one_flow():
    p = assign_virtual_flows(asm_program("""
    LOAD [SEND] dep=0 flow=0 addr=coord(0:0,0) size=1
    STORE_DEP [RECV] dep=1 flow=0 addr=coord(0:0,0) size=1
    LOAD_DEP [SEND] dep=1 flow=0 addr=coord(0:0,0) size=1
    STORE [RECV] dep=0 flow=0 addr=coord(0:0,0) size=1
    """))
    assert len({u.flow for u in p.streams["vmc0"]}) == 1


def test_independent_loads_get_distinct_flows():
    vmc = "\n".join(f"LOAD [] dep=0 flow=0 addr=coord({i}:0,0) size=1" for i in range(10))
    p = assign_virtual_flows(asm_program(vmc))
    assert sorted(u.flow for u in p.streams["vmc0"]) == list(range(1, 11))


def test_fig4_load_of_m_gets_its_own_flow():
    p = assign_virtual_flows(lower(FIG4, select_tilings(FIG4, FOUR), FOUR))
    s = p.streams["vmc0"]
    dep_chain = {u.flow for u in s if u.dep_id}
    m_load = next(u for u in s if u.address.tensor == p.tensor_id("M"))
    assert len(dep_chain) == 1 and m_load.flow not in dep_chain


@pytest.mark.parametrize("seed", range(20))
def test_flows_equal_components(seed):
    rng = random.Random(seed)
    g = random_graph(rng)
    hw = tight_profile(rng, slots=64)
    p = assign_virtual_flows(lower(g, select_tilings(g, hw), hw))
    for core in p.vmcs():
        assert flow_partition(p, core) == flow_oracle(p, core)


def test_flows_disabled_is_one_stream():
    p = generate(FIG4, FOUR, GenerateOptions(flows=False))
    assert {u.flow for s in p.streams.values() for u in s} == {0}


# -- deadlock repair ---------------------------------------------------------

def attention_pairs():
    """Two compute cores, each running two attention blocks of three inputs, on four slots."""
    lines = []
    for k, (base, lane) in enumerate([(0, 0), (4, 1), (8, 0), (12, 1)]):
        lines += [f"LOAD [SEND] dep=0 flow={3 * k + i + 1} addr=coord({base + i}:0,0) size=1 lane={lane}"
                  for i in range(3)]
    for k, (base, lane) in enumerate([(3, 0), (7, 1), (11, 0), (15, 1)]):
        lines.append(f"STORE [RECV] dep=0 flow={13 + k} addr=coord({base}:0,0) size=1 lane={lane}")
    attn = "ATTN [] dep=0 flow=0 addr=- size=1\n" * 2
    return asm_program("\n".join(lines), attn, slots=4, lanes=2, vcc1=attn)


def test_deadlock_fix_hoists_store():
    p = attention_pairs()
    before = allocation_model(p, "vmc0")
    assert not before.ok and before.reason == "overflow"
    assert run(p).status == "deadlock"
    q = fix_deadlocks(p)
    s = q.streams["vmc0"]
    assert names(s)[:4] == ["LOAD", "LOAD", "LOAD", "STORE"] and s[3].lane == 0
    after = allocation_model(q, "vmc0")
    assert after.ok and after.peak <= 4
    assert verify_certificate(q)
    assert sorted(q.baseline_order["vmc0"]) == list(range(len(s)))
    assert run(q).status == "completed"


def test_fitting_program_is_untouched():
    p = generate(FIG4, FOUR)
    q = fix_deadlocks(p)
    assert q.streams == p.streams
    assert q.baseline_order["vmc0"] == tuple(range(len(p.streams["vmc0"])))


def test_oversized_load_is_a_deadlock_error():
    p = asm_program("LOAD [SEND] dep=0 flow=1 addr=coord(0:0,0) size=5", "MATVEC [] dep=0 flow=0 addr=- size=1",
                    slots=4)
    with pytest.raises(DeadlockError, match="LOAD at position 0"):
        fix_deadlocks(p)


@pytest.mark.parametrize("seed", range(30))
def test_generated_programs_carry_certificates(seed):
    rng = random.Random(seed)
    g = random_graph(rng)
    p = generate(g, tight_profile(rng))
    assert verify_certificate(p)
    assert p.violations() == []


# -- redundant dependencies --------------------------------------------------

REDUNDANT = """
STORE_DEP [RECV] dep=1 flow=1 addr=coord(0:0,0) size=1
STORE_DEP [] dep=2 flow=1 addr=coord(0:0,0) size=0
LOAD_DEP [SEND] dep=1 flow=1 addr=coord(0:0,0) size=1
LOAD_DEP [SEND] dep=2 flow={flow} addr=coord(1:0,0) size=1
"""


def test_transitive_edge_on_one_flow_is_removed():
    p = asm_program(REDUNDANT.format(flow=1))
    q = eliminate_redundant_dependencies(p)
    assert 2 not in q.queues
    assert all(u.dep_id != 2 for u in q.streams["vmc0"])


def test_cross_flow_edge_is_kept():
    p = asm_program(REDUNDANT.format(flow=2))
    q = eliminate_redundant_dependencies(p)
    assert 2 in q.queues
    assert any(u.dep_id == 2 and u.opcode == Opcode.LOAD_DEP for u in q.streams["vmc0"])


def closure(p, core):
    """Reachability over flow order and same-core dependencies, keyed by survivor rank."""
    inst = [u for _, u, _ in p.instances(core) if u.op_class is OpClass.MEMORY]
    keep = [k for k, u in enumerate(inst) if not (u.opcode == Opcode.STORE_DEP and u.size == 0
                                                   and u.dep_id not in p.queues)]
    g = nx.DiGraph()
    g.add_nodes_from(range(len(inst)))
    last, prod = {}, {}
    for k, u in enumerate(inst):
        if u.flow in last:
            g.add_edge(last[u.flow], k)
        last[u.flow] = k
        if u.dep_id and u.dep_id in p.queues and p.queues[u.dep_id].producer == core:
            if u.opcode in STORES:
                prod[u.dep_id] = k
            elif u.dep_id in prod:
                g.add_edge(prod[u.dep_id], k)
    rank = {k: r for r, k in enumerate(keep)}
    return {(rank[a], rank[b]) for a in keep for b in nx.descendants(g, a) if b in rank}


@pytest.mark.parametrize("seed", range(25))
def test_redundancy_elimination_preserves_closure(seed):
    rng = random.Random(seed)
    g = random_graph(rng)
    hw = tight_profile(rng, slots=64)
    p = assign_virtual_flows(unfold_program(lower(g, select_tilings(g, hw), hw)))
    q = eliminate_redundant_dependencies(p)
    q.check()
    for core in p.vmcs():
        dropped = [u for _, u, _ in p.instances(core)
                   if u.opcode == Opcode.STORE_DEP and u.size == 0 and u.dep_id not in q.queues]
        before = closure(p, core) if not dropped else None
        after = closure(q, core)
        if before is not None:
            assert before == after


# -- fusion ------------------------------------------------------------------

def test_fig4_intermediate_is_fused():
    p = lower(FIG4, select_tilings(FIG4, FOUR), FOUR)
    q = apply_dynamic_fusion(p)
    s = q.streams["vmc0"]
    assert names(s) == ["LOAD", "LOAD", "STORE_LOCAL", "LOAD", "LOAD_LOCAL", "STORE"]
    assert all(e.local for e in q.queues.values())
    assert p.global_traffic() - q.global_traffic() == 4 * 64 * 2


def test_one_to_many_edge_is_not_fused():
    g = parse_workload("""
tensors:
  - {name: x, shape: [16, 16], tile: [16, 16]}
  - {name: y, shape: [16, 16], tile: [16, 16]}
  - {name: a, shape: [16, 16], tile: [16, 16]}
  - {name: b, shape: [16, 16], tile: [16, 16]}
operators:
  - {id: f, kind: ELEMWISE, inputs: [x], outputs: [y], attrs: {fn: silu}}
  - {id: g, kind: ELEMWISE, inputs: [y], outputs: [a], attrs: {fn: neg}}
  - {id: h, kind: ELEMWISE, inputs: [y], outputs: [b], attrs: {fn: relu, pair: 1}}
""")
    p = lower(g, select_tilings(g, FOUR), FOUR)
    q = apply_dynamic_fusion(p)
    assert q.streams == p.streams
    assert not any(e.local for e in q.queues.values())


def test_mlp_fuses_both_intermediates():
    g = parse_workload((WORKLOADS / "mlp.yaml").read_text())
    # row blocks stay on one pair through all three operators
    aligned = {n.id: next(c for c in decompositions(n, g, FOUR) if c.splits == (("M", 2), ("N", 1)))
               for n in g.nodes}
    p = lower(g, aligned, FOUR)
    q = apply_dynamic_fusion(p)
    fused = {t for s in q.streams.values() for u in s if u.opcode == Opcode.STORE_LOCAL
             for t in [q.tensors[u.address.tensor].name]}
    assert len(fused) == 2
    local = sum(e.local for e in q.queues.values())
    tile = q.tensors[q.tensor_id(sorted(fused)[0])].tile_bytes
    assert p.global_traffic() - q.global_traffic() == local * tile * 2


# -- loop folding ------------------------------------------------------------

def test_fold_unfold_round_trip_on_corpus():
    for name in ["mlp", "transformer_2layer", "matvec_rope_pipe8"]:
        g = parse_workload((WORKLOADS / f"{name}.yaml").read_text())
        flat = generate(g, FOUR, GenerateOptions(fold=False))
        folded = fold_loops(flat)
        for core in flat.streams:
            assert [i[1:] for i in folded.instances(core)] == [i[1:] for i in flat.instances(core)]


def test_single_word_is_not_folded():
    p = asm_program("LOAD [] dep=0 flow=1 addr=coord(0:0,0) size=1")
    assert fold_loops(p).streams == p.streams


def test_interleaved_progressions_keep_their_strides():
    # t0 steps one tile per iteration, t1 two
    words = []
    for k in range(8):
        words.append(f"LOAD [] dep=0 flow=1 addr=coord(0:{k},0) size=1")
        words.append(f"LOAD [] dep=0 flow=2 addr=coord(1:{2 * k},0) size=1")
    p = asm_program("\n".join(words), rows=256)
    q = fold_loops(p)
    assert [i[1:] for i in q.instances("vmc0")] == [i[1:] for i in p.instances("vmc0")]
    s = q.streams["vmc0"]
    assert len(s) < len(p.streams["vmc0"])
    assert sorted(u.imm for u in s if u.opcode == Opcode.ADD_ACC) == [1, 2]
    body = [u for u in s if Flag.DYNAMIC in Flag(u.flags)]
    assert len(body) == 2 and body[0].reg_ops[0] != body[1].reg_ops[0]


def test_repeated_layers_fold_tenfold():
    g = parse_workload((WORKLOADS / "layers32.yaml").read_text())
    p = generate(g, FOUR)
    flat = unfold_program(p)
    for core in p.vmcs():
        if flat.streams[core]:
            assert len(flat.streams[core]) >= 10 * len(p.streams[core])
