"""Lowering an operator graph plus per-operator tilings into per-core streams."""

from __future__ import annotations

from collections import defaultdict

from ..costmodel import HardwareProfile
from ..isa import Coord, Flag, Opcode, UopWord
from ..workload import OperatorGraph, TilingChoice, work_items
from .program import LoweredProgram, LoweringError, QueueEntry, vcc_name, vmc_name


def _placement(g: OperatorGraph, tilings: dict, hw: HardwareProfile) -> list:
    """Per operator (topological order): {sm: [(lane, WorkItem), ...]} in emission order."""
    plan = []
    for n in g.topo_order():
        items = work_items(n, g)
        choice: TilingChoice = tilings[n.id]
        if len(choice.assignment) != len(items):
            raise LoweringError(f"{n.id}: tiling covers {len(choice.assignment)} of {len(items)} work items")
        per_lane: dict = defaultdict(list)
        for it, pair in zip(items, choice.assignment):
            if not 0 <= pair < hw.pair_count:
                raise LoweringError(f"{n.id}: pair {pair} outside 0..{hw.pair_count - 1}")
            per_lane[hw.pair_location(pair)].append(it)
        by_sm: dict = {}
        for sm in sorted({sm for sm, _ in per_lane}):
            lanes = sorted(lane for s, lane in per_lane if s == sm)
            order = []
            depth = max(len(per_lane[(sm, lane)]) for lane in lanes)
            for r in range(depth):  # round-robin so every lane gets work early
                for lane in lanes:
                    queue = per_lane[(sm, lane)]
                    if r < len(queue):
                        order.append((lane, queue[r]))
            by_sm[sm] = order
        plan.append((n, by_sm))
    return plan


def _check_budget(plan: list, budget: int) -> None:
    for n, by_sm in plan:
        for order in by_sm.values():
            for _, it in order:
                need = len(it.pre) + max([len(i) for i in it.iterations] + [1])
                if need > budget:
                    raise LoweringError(
                        f"{n.id}: one work item needs {need} slots but the budget is {budget}; "
                        "choose a coarser tiling or larger slots")


def lower(g: OperatorGraph, tilings: dict, hw: HardwareProfile) -> LoweredProgram:
    """Emit one stream per VMC and VCC.

    For each operator in topological order, a VMC first issues every input
    load of its work items (round-robin across lanes), then the result
    stores. Produced tiles go out through STORE_DEP with one dependency queue
    per consumer load; extra consumers get zero-size signal µops.
    """
    plan = _placement(g, tilings, hw)
    _check_budget(plan, hw.slot_count)
    tid = {name: i for i, name in enumerate(g.tensors)}
    produced = {t for n in g.nodes for t in n.outputs}

    # consumers of each produced tile, in emission order: list of consumer SMs
    consumers: dict = defaultdict(list)
    for n, by_sm in plan:
        for sm, order in by_sm.items():
            for _, it in order:
                for t, c in it.inputs:
                    if t in produced:
                        consumers[(t, c)].append(sm)

    streams: dict = {}
    tags: dict = {}
    flops: dict = {}
    for sm in range(hw.sm_count):
        streams[vmc_name(sm)], tags[vmc_name(sm)] = [], []
        for lane in range(hw.vcc_per_sm):
            c = vcc_name(sm, lane)
            streams[c], tags[c], flops[c] = [], [], []
    for c in list(streams):
        if c.startswith("vmc"):
            flops[c] = []

    queues: dict = {}
    deps: dict = {}              # (tile, consumer ordinal) -> dep_id
    seen_loads: dict = defaultdict(int)
    next_dep = 1

    def emit(core, u, tag, fl=0.0):
        streams[core].append(u)
        tags[core].append(tag)
        flops[core].append(fl)

    for k, (n, by_sm) in enumerate(plan):
        for sm, order in by_sm.items():
            vmc = vmc_name(sm)
            for lane, it in order:
                for t, c in it.inputs:
                    addr = Coord(tid[t], tuple(c))
                    if t in produced:
                        ordinal = seen_loads[(t, c)]
                        seen_loads[(t, c)] += 1
                        emit(vmc, UopWord(Opcode.LOAD_DEP, Flag.SEND, deps[((t, c), ordinal)],
                                          0, addr, 1, lane=lane), k)
                    else:
                        emit(vmc, UopWord(Opcode.LOAD, Flag.SEND, 0, 0, addr, 1, lane=lane), k)
                emit(vcc_name(sm, lane), UopWord(it.opcode, size=it.size, imm=it.imm), k, it.flops)
                # store right behind the item's loads so results leave as soon as they exist
                t, c = it.out
                addr = Coord(tid[t], tuple(c))
                ids = []
                for j, csm in enumerate(consumers.get((t, c), [])):
                    deps[((t, c), j)] = next_dep
                    queues[next_dep] = QueueEntry(next_dep, vmc, vmc_name(csm))
                    ids.append(next_dep)
                    next_dep += 1
                if not ids:
                    emit(vmc, UopWord(Opcode.STORE, Flag.RECV, 0, 0, addr, 1, lane=lane), k)
                    continue
                emit(vmc, UopWord(Opcode.STORE_DEP, Flag.RECV, ids[0], 0, addr, 1, lane=lane), k)
                for d in ids[1:]:
                    emit(vmc, UopWord(Opcode.STORE_DEP, Flag(0), d, 0, addr, 0), k)
        if next_dep > 0xFFFF:
            raise LoweringError("more than 65535 dependency queues")

    return LoweredProgram(
        hw=hw,
        tensors=list(g.tensors.values()),
        streams=streams,
        tags=tags,
        queues=queues,
        ops=[n.id for n, _ in plan],
        outputs=list(g.outputs),
        flops=flops,
        baseline_order={c: tuple(range(len(s))) for c, s in streams.items() if c.startswith("vmc")},
    )
