"""Program-level passes: dynamic fusion, loop folding, virtual flows,
deadlock repair and redundant-dependency elimination.

Every pass takes a ``LoweredProgram`` and returns a new one.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .. import _kernels
from ..isa import (LOCAL_OPS, NUM_ACC, STORES, Coord, DescriptorIndex, Flag, Literal, Opcode, OpClass,
                   UopWord)
from .program import LoweredProgram

MAX_FLOWS = 255


# ---------------------------------------------------------------------------
# dynamic fusion
# ---------------------------------------------------------------------------

def apply_dynamic_fusion(p: LoweredProgram) -> LoweredProgram:
    """Keep single-consumer intermediates on chip.

    A STORE_DEP/LOAD_DEP pair on the same VMC whose tile has no other
    consumer and is not a graph output becomes STORE_LOCAL/LOAD_LOCAL: the
    result slot is handed to the consumer without a DRAM round trip.
    """
    q = p.copy()
    keep = {q.tensor_id(t) for t in q.outputs}
    for vmc in q.vmcs():
        s = q.streams[vmc]
        static = [u for u in s if Flag.DYNAMIC not in Flag(u.flags)]
        signalled = {u.address for u in static if u.opcode == Opcode.STORE_DEP and u.size == 0}
        prod, cons = {}, {}
        for i, u in enumerate(s):
            if Flag.DYNAMIC in Flag(u.flags) or not u.dep_id:
                continue
            if u.opcode == Opcode.STORE_DEP and u.size > 0:
                prod[u.dep_id] = i
            elif u.opcode == Opcode.LOAD_DEP:
                cons[u.dep_id] = i
        for d, i in prod.items():
            j = cons.get(d)
            entry = q.queues.get(d)
            if j is None or entry is None or entry.consumer != vmc:
                continue
            u = s[i]
            if u.address in signalled or u.address.tensor in keep:
                continue
            s[i] = replace(u, opcode=Opcode.STORE_LOCAL)
            s[j] = replace(s[j], opcode=Opcode.LOAD_LOCAL)
            q.queues[d] = replace(entry, local=True)
    return q


# ---------------------------------------------------------------------------
# loop folding
# ---------------------------------------------------------------------------

def _signature(u: UopWord, flops: float) -> tuple:
    # the address enters only through its offset column
    return (int(u.opcode), int(u.flags), u.flow, u.address is not None, u.size, u.reg_ops,
            u.imm, u.lane, bool(u.dep_id), flops)


def _columns(p: LoweredProgram, words: list) -> tuple:
    off = np.zeros(len(words), dtype=np.int64)
    dep = np.zeros(len(words), dtype=np.int64)
    for i, u in enumerate(words):
        if isinstance(u.address, Coord):
            off[i] = p.tile_index(u.address.tensor, u.address.coord)
        elif isinstance(u.address, DescriptorIndex):
            off[i] = u.address.index
        elif isinstance(u.address, Literal):
            off[i] = -1  # literal byte addresses never fold
        dep[i] = u.dep_id
    return off, dep


def _plan_loop(sig, off, dep, tag, words, i, period, reps):
    """Register assignment for one candidate loop, or None when it cannot be encoded."""
    a = slice(i, i + period)
    b = slice(i + period, i + 2 * period)
    s_off = off[b] - off[a]
    s_dep = dep[b] - dep[a]
    s_tag = tag[b] - tag[a]
    dynamic = []
    values: list[int] = []
    for j in range(period):
        u = words[i + j]
        dyn = s_off[j] != 0 or (u.dep_id and s_dep[j] != 0)
        dynamic.append(bool(dyn))
        if not dyn:
            continue
        if u.address is None or isinstance(u.address, Literal) or u.reg_ops != (0, 0):
            return None
        for v in (int(s_off[j]), int(s_dep[j]) if u.dep_id else None):
            if v is not None and v not in values:
                values.append(v)
        last = off[i + j] + (reps - 1) * s_off[j]
        if last > 0xFFFF or off[i + j] > 0xFFFF:
            return None
        if u.dep_id and dep[i + j] + (reps - 1) * s_dep[j] > 0xFFFF:
            return None
    if len(values) > NUM_ACC:
        return None
    return dynamic, values, s_off, s_dep, s_tag


def _fold_flat(p: LoweredProgram, words: list, tags: list, flops: list) -> tuple:
    n = len(words)
    if n < 4:
        return list(words), list(tags), [0] * n, list(flops)
    keys: dict = {}
    sig = np.array([keys.setdefault(_signature(u, f), len(keys)) for u, f in zip(words, flops)],
                   dtype=np.int64)
    off, dep = _columns(p, words)
    tag = np.asarray(tags, dtype=np.int64)
    out_w, out_t, out_s, out_f = [], [], [], []
    i = 0
    while i < n:
        best = None
        if n - i >= 4:
            cands = np.flatnonzero(sig[i + 1:i + 1 + (n - i) // 2] == sig[i]) + 1
            for period in cands:
                period = int(period)
                reps = _kernels.repeat_count(sig, off, dep, tag, i, period)
                if reps < 2:
                    continue
                plan = None
                while reps >= 2:
                    plan = _plan_loop(sig, off, dep, tag, words, i, period, reps)
                    if plan is not None:
                        break
                    reps -= 1
                if plan is None:
                    continue
                overhead = 2 + len(plan[1]) + sum(1 for v in plan[1] if v)
                gain = period * reps - period - overhead
                if gain > 0 and (best is None or gain > best[0]):
                    best = (gain, period, reps, plan)
        if best is None:
            out_w.append(words[i])
            out_t.append(tags[i])
            out_s.append(0)
            out_f.append(flops[i])
            i += 1
            continue
        _, period, reps, (dynamic, values, s_off, s_dep, s_tag) = best
        reg = {v: r for r, v in enumerate(values)}

        def ctl(u):
            out_w.append(u)
            out_t.append(-1)
            out_s.append(0)
            out_f.append(0.0)

        for v, r in reg.items():
            ctl(UopWord(Opcode.SET_ACC, reg_ops=(r, 0), imm=0))
        ctl(UopWord(Opcode.LOOP, imm=reps))
        for j in range(period):
            u = words[i + j]
            if dynamic[j]:
                r_dep = reg[int(s_dep[j])] if u.dep_id else 0
                u = replace(u, flags=Flag(u.flags) | Flag.DYNAMIC,
                            address=DescriptorIndex(int(off[i + j])),
                            reg_ops=(reg[int(s_off[j])], r_dep))
            out_w.append(u)
            out_t.append(tags[i + j])
            out_s.append(int(s_tag[j]))
            out_f.append(flops[i + j])
        for v, r in reg.items():
            if v:
                ctl(UopWord(Opcode.ADD_ACC, reg_ops=(r, 0), imm=v))
        ctl(UopWord(Opcode.REPEAT))
        i += period * reps
    return out_w, out_t, out_s, out_f


def fold_stream(p: LoweredProgram, core: str) -> tuple:
    """Fold one flat stream; returns (words, tags, tag_strides, flops)."""
    words = p.streams[core]
    if any(u.op_class is OpClass.CONTROL for u in words):
        return list(words), list(p.tags[core]), list(p.strides_for(core)), list(p.flops_for(core))
    return _fold_flat(p, words, p.tags[core], p.flops_for(core))


def fold_loops(p: LoweredProgram) -> LoweredProgram:
    """Replace repeated µop runs with counted loops over accumulator-relative words.

    Runs that repeat with a constant per-position stride in tile descriptor,
    dep_id and operator tag become LOOP/REPEAT bodies. Unfolding the result
    reproduces the original instance sequence.
    """
    q = p.copy()
    for core in q.streams:
        w, t, s, f = fold_stream(p, core)
        q.streams[core], q.tags[core], q.tag_strides[core], q.flops[core] = w, t, s, f
    return q


def unfold_stream(p: LoweredProgram, core: str) -> tuple:
    """Flat (words, tags, flops) reproducing the dynamic sequence of ``core``."""
    fl = p.flops_for(core)
    words, tags, flops = [], [], []
    for idx, u, tag in p.instances(core):
        words.append(u)
        tags.append(tag)
        flops.append(fl[idx])
    return words, tags, flops


def unfold_program(p: LoweredProgram) -> LoweredProgram:
    q = p.copy()
    for core in q.streams:
        w, t, f = unfold_stream(p, core)
        q.streams[core], q.tags[core], q.flops[core] = w, t, f
        q.tag_strides[core] = [0] * len(w)
    return q


# ---------------------------------------------------------------------------
# virtual flows
# ---------------------------------------------------------------------------

class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def assign_virtual_flows(p: LoweredProgram, enabled: bool = True) -> LoweredProgram:
    """Group memory µops that must stay ordered into the same virtual flow.

    Two µops share a flow when one feeds the other through an on-core
    dependency queue, or when both touch the same tile and at least one of
    them writes or signals it. Unrelated groups get distinct flows, so a
    stalled µop only blocks its own flow. With ``enabled=False`` every µop
    goes to flow 0 (one in-order stream per core).
    """
    q = p.copy()
    for core in q.streams:
        s = q.streams[core]
        if not enabled or core.startswith("vcc"):
            q.streams[core] = [replace(u, flow=0) if u.flow else u for u in s]
            continue
        uf = _UnionFind()
        prod, cons = {}, {}
        by_tile: dict = {}
        for idx, u, _ in p.instances(core):
            uf.find(idx)
            if u.dep_id:
                (prod if u.opcode in STORES else cons)[u.dep_id] = idx
            if u.address is not None:
                by_tile.setdefault(u.address, []).append((idx, u.opcode in STORES))
        for d, i in prod.items():
            if d in cons:
                uf.union(i, cons[d])
        for group in by_tile.values():
            if any(w for _, w in group):
                first = group[0][0]
                for idx, _ in group[1:]:
                    uf.union(first, idx)
        roots = sorted({uf.find(i) for i in uf.parent})
        flow_of = {r: k % MAX_FLOWS + 1 for k, r in enumerate(roots)}
        q.streams[core] = [replace(u, flow=flow_of[uf.find(i)]) if i in uf.parent else u
                           for i, u in enumerate(s)]
    return q


# ---------------------------------------------------------------------------
# slot-budget model and deadlock repair
# ---------------------------------------------------------------------------

class DeadlockError(RuntimeError):
    """The program cannot run within the slot budget."""


class _Token:
    __slots__ = ("slots", "ready", "pos")

    def __init__(self, slots: int, ready: bool, pos: int):
        self.slots = slots
        self.ready = ready
        self.pos = pos


class _Lane:
    __slots__ = ("work", "ci", "held", "done_iters", "popped")

    def __init__(self, work):
        self.work = work      # [(pre, per_iteration, iterations)]
        self.ci = 0
        self.held = []        # pre tokens of the current compute µop
        self.done_iters = 0
        self.popped = False   # pre tokens taken


def _lane_work(p: LoweredProgram, vcc: str) -> list:
    from ..machine.handlers import elemwise_arity  # local: machine imports generator
    out = []
    for _, u, _ in p.instances(vcc):
        op = Opcode(u.opcode)
        if op == Opcode.ATTN:
            out.append((1, 2, u.size))
        elif op == Opcode.ELEMWISE:
            out.append((0, elemwise_arity(u.imm), u.size))
        elif op == Opcode.EMBED:
            out.append((0, 1, u.size))
        else:
            out.append((0, 2, u.size))
    return out


class AllocationResult:
    def __init__(self, ok, peak, fail_pos=None, blocked=None, reason=""):
        self.ok = ok
        self.peak = peak
        self.fail_pos = fail_pos
        self.blocked = blocked or {}   # lane -> position of its last popped input
        self.reason = reason

    def __bool__(self):
        return self.ok


def allocation_model(p: LoweredProgram, vmc: str, words: list | None = None) -> AllocationResult:
    """Replay slot allocation for one VMC in issue order.

    Each compute core is advanced as far as the already-allocated slots allow
    before every allocation; inputs are recycled before the result slot is
    claimed and a result slot is released once written back (local results move to their
    consumer instead). The program fits when no allocation ever exceeds the
    budget. Generated programs use one-slot transfers, for which counting
    slots is exact.
    """
    from .program import parse_core, vcc_name
    budget = p.slot_budget
    _, sm, _ = parse_core(vmc)
    if words is None:
        words = [u for _, u, _ in p.instances(vmc)]
    lanes = [_Lane(_lane_work(p, vcc_name(sm, l))) if vcc_name(sm, l) in p.streams else _Lane([])
             for l in range(p.hw.vcc_per_sm)]
    inq = [[] for _ in lanes]
    outq = [[] for _ in lanes]
    heads_in = [0] * len(lanes)
    heads_out = [0] * len(lanes)
    local: dict = {}
    state = {"occ": 0, "peak": 0}

    def advance() -> bool:
        moved_any = False
        moved = True
        while moved:
            moved = False
            for li, lane in enumerate(lanes):
                while lane.ci < len(lane.work):
                    pre, per, iters = lane.work[lane.ci]
                    q = inq[li]
                    h = heads_in[li]
                    if not lane.popped:
                        if len(q) - h < pre or not all(t.ready for t in q[h:h + pre]):
                            break
                        lane.held = q[h:h + pre]
                        heads_in[li] = h = h + pre
                        lane.popped = True
                    if lane.done_iters < iters:
                        if len(q) - h < per or not all(t.ready for t in q[h:h + per]):
                            break
                        for t in q[h:h + per]:
                            state["occ"] -= t.slots
                        heads_in[li] = h + per
                        lane.done_iters += 1
                        moved = True
                        continue
                    # handlers recycle every input before claiming the result slot
                    if lane.held:
                        for t in lane.held:
                            state["occ"] -= t.slots
                        lane.held = []
                        moved = True
                    if heads_out[li] >= len(outq[li]):
                        break
                    out = outq[li][heads_out[li]]
                    heads_out[li] += 1
                    if out.ready is None:      # local result: stays allocated, now readable
                        out.ready = True
                    else:
                        state["occ"] -= out.slots
                    lane.ci += 1
                    lane.held = []
                    lane.done_iters = 0
                    lane.popped = False
                    moved = True
            moved_any |= moved
        return moved_any

    def blocked_lanes() -> dict:
        out = {}
        for li, lane in enumerate(lanes):
            if lane.ci >= len(lane.work):
                continue
            pre, per, iters = lane.work[lane.ci]
            if lane.popped and lane.done_iters >= iters and heads_out[li] >= len(outq[li]):
                consumed = [t.pos for t in inq[li][:heads_in[li]]]
                out[li] = max(consumed) if consumed else -1
        return out

    def allocate(n: int, pos: int) -> AllocationResult | None:
        if n > budget:
            return AllocationResult(False, state["peak"], pos, reason="too-large")
        while state["occ"] + n > budget:
            if not advance():
                return AllocationResult(False, state["peak"], pos, blocked_lanes(), "overflow")
        state["occ"] += n
        state["peak"] = max(state["peak"], state["occ"])
        return None

    for pos, u in enumerate(words):
        op = u.opcode
        flags = Flag(u.flags)
        lane = u.lane if u.lane < len(lanes) else 0
        if op in (Opcode.LOAD, Opcode.LOAD_DEP):
            fail = allocate(u.size, pos)
            if fail is not None:
                return fail
            if Flag.SEND in flags:
                inq[lane].append(_Token(u.size, True, pos))
            else:
                state["occ"] -= u.size
        elif op == Opcode.LOAD_LOCAL:
            tok = local.get(u.dep_id)
            if tok is None:
                return AllocationResult(False, state["peak"], pos, reason="local-before-producer")
            tok.pos = pos
            inq[lane].append(tok)
        elif op in STORES and Flag.RECV in flags:
            fail = allocate(max(u.size, 1), pos)
            if fail is not None:
                return fail
            tok = _Token(max(u.size, 1), None if op == Opcode.STORE_LOCAL else False, pos)
            if op == Opcode.STORE_LOCAL:
                local[u.dep_id] = tok
            outq[lane].append(tok)
        elif op == Opcode.ALLOC:
            fail = allocate(u.size, pos)
            if fail is not None:
                return fail
        elif op == Opcode.FREE:
            state["occ"] -= u.size
    advance()
    return AllocationResult(True, state["peak"])


def _movable(words: list, src: int, dst: int) -> bool:
    """A store may move up to ``dst`` unless it would pass a same-lane result or its own tile."""
    u = words[src]
    for k in range(dst, src):
        w = words[k]
        if w.lane == u.lane and w.opcode in STORES and Flag.RECV in Flag(w.flags):
            return False
        if w.address is not None and w.address == u.address:
            return False
    return True


def _repair(p: LoweredProgram, vmc: str, words: list) -> list:
    order = list(range(len(words)))
    cur = list(words)
    for _ in range(4 * len(words) + 8):
        res = allocation_model(p, vmc, cur)
        if res.ok:
            return order
        if res.reason != "overflow":
            u = cur[res.fail_pos]
            raise DeadlockError(
                f"{vmc}: {Opcode(u.opcode).name} at position {res.fail_pos} cannot fit in "
                f"{p.slot_budget} slots ({res.reason}); use smaller tiles or more slots")
        choice = None
        for li, last_in in sorted(res.blocked.items(), key=lambda kv: kv[1]):
            src = next((k for k in range(res.fail_pos, len(cur))
                        if cur[k].lane == li and cur[k].opcode in STORES
                        and Flag.RECV in Flag(cur[k].flags)), None)
            if src is None:
                continue
            dst = last_in + 1
            if dst < src and _movable(cur, src, dst):
                choice = (src, dst)
                break
        if choice is None:
            raise DeadlockError(
                f"{vmc}: slot budget of {p.slot_budget} exhausted at position {res.fail_pos} "
                "and no store can be hoisted")
        src, dst = choice
        cur.insert(dst, cur.pop(src))
        order.insert(dst, order.pop(src))
    raise DeadlockError(f"{vmc}: deadlock repair did not converge")


def _unfuse(q: LoweredProgram, words: list) -> list:
    back = {Opcode.STORE_LOCAL: Opcode.STORE_DEP, Opcode.LOAD_LOCAL: Opcode.LOAD_DEP}
    out = []
    for u in words:
        if u.opcode in back:
            entry = q.queues.get(u.dep_id)
            if entry is not None and entry.local:
                q.queues[u.dep_id] = replace(entry, local=False)
            u = replace(u, opcode=back[Opcode(u.opcode)])
        out.append(u)
    return out


def fix_deadlocks(p: LoweredProgram, refold: bool = True) -> LoweredProgram:
    """Reorder each VMC stream so in-order slot allocation always completes.

    Streams that already fit are untouched. Otherwise result stores are
    hoisted to just after the inputs of their computation, which lets the
    compute core release slots before later loads claim them; if on-chip
    (fused) results alone exhaust the budget they are routed back through
    DRAM. The resulting issue order is recorded in ``baseline_order`` as a
    certificate.
    """
    q = p.copy()
    for vmc in q.vmcs():
        if allocation_model(q, vmc).ok:
            q.baseline_order[vmc] = tuple(range(len(q.streams[vmc])))
            continue
        words, tags, flops = unfold_stream(q, vmc)
        try:
            order = _repair(q, vmc, words)
        except DeadlockError:
            # results parked on chip can exhaust the budget; send them through DRAM instead
            if not any(u.opcode in LOCAL_OPS for u in words):
                raise
            words = _unfuse(q, words)
            order = _repair(q, vmc, words)
        q.streams[vmc] = [words[i] for i in order]
        q.tags[vmc] = [tags[i] for i in order]
        q.flops[vmc] = [flops[i] for i in order]
        q.tag_strides[vmc] = [0] * len(order)
        q.baseline_order[vmc] = tuple(order)
        if refold and p.is_folded():
            w, t, s, f = fold_stream(q, vmc)
            q.streams[vmc], q.tags[vmc], q.tag_strides[vmc], q.flops[vmc] = w, t, s, f
    return q


def verify_certificate(p: LoweredProgram) -> bool:
    """Replay every VMC's allocations in issue order against the slot budget."""
    return all(allocation_model(p, vmc).ok for vmc in p.vmcs())


# ---------------------------------------------------------------------------
# redundant dependency elimination
# ---------------------------------------------------------------------------

def eliminate_redundant_dependencies(p: LoweredProgram) -> LoweredProgram:
    """Drop on-core dependency queues whose ordering the flows already imply.

    Within a flow each µop waits for its predecessor to complete, so a
    STORE_DEP -> LOAD_DEP edge between µops of one VMC is redundant when the
    consumer is reachable from the producer through flow order and other
    dependencies. Local (fused) queues carry data and are always kept; so is
    every cross-core queue.
    """
    q = p.copy()
    for vmc in q.vmcs():
        inst = p.instances(vmc)
        n = len(inst)
        if n == 0:
            continue
        succ: list = [set() for _ in range(n)]
        last_in_flow: dict = {}
        prod, cons = {}, {}
        for k, (_, u, _) in enumerate(inst):
            if u.op_class is not OpClass.MEMORY:
                continue
            if u.flow in last_in_flow:
                succ[last_in_flow[u.flow]].add(k)
            last_in_flow[u.flow] = k
            if u.dep_id:
                (prod if u.opcode in STORES else cons)[u.dep_id] = k
        cand = []
        for d, i in prod.items():
            j = cons.get(d)
            if j is None or j <= i:
                continue
            succ[i].add(j)
            entry = q.queues.get(d)
            if entry is not None and not entry.local:
                cand.append((d, i, j))
        if not cand:
            continue
        indptr = np.zeros(n + 1, dtype=np.int64)
        for i in range(n):
            indptr[i + 1] = indptr[i] + len(succ[i])
        indices = np.array([j for i in range(n) for j in sorted(succ[i])], dtype=np.int64)
        reach = _kernels.reach_closure(indptr, indices, n)
        redundant = {}
        for d, i, j in cand:
            red = any(w != j and _kernels.reachable(reach, w, j) for w in succ[i])
            key = (inst[i][0], inst[j][0])
            redundant.setdefault(key, []).append((d, red))
        # a folded word carries several deps; rewrite it only if all of them go
        deps_of: dict = {}
        for si, u, _ in inst:
            if u.dep_id:
                deps_of.setdefault(si, set()).add(u.dep_id)
        pairs = {key: {d for d, _ in items} for key, items in redundant.items()
                 if all(r for _, r in items)}
        while True:
            droppable = set().union(*pairs.values()) if pairs else set()
            keep = {key for key in pairs
                    if deps_of.get(key[0], set()) <= droppable
                    and deps_of.get(key[1], set()) <= droppable}
            if len(keep) == len(pairs):
                break
            pairs = {key: pairs[key] for key in keep}
        if not pairs:
            continue
        drop_static = {si for key in pairs for si in key}
        for deps in pairs.values():
            for d in deps:
                q.queues.pop(d, None)
        _rewrite_without_deps(q, vmc, drop_static)
    return q


def _rewrite_without_deps(q: LoweredProgram, vmc: str, drop: set) -> None:
    words, tags = q.streams[vmc], q.tags[vmc]
    strides, flops = q.strides_for(vmc), q.flops_for(vmc)
    keep_w, keep_t, keep_s, keep_f = [], [], [], []
    for i, u in enumerate(words):
        if i in drop:
            if u.opcode == Opcode.STORE_DEP and u.size == 0:
                continue  # a pure signal with nobody left to tell
            op = {Opcode.STORE_DEP: Opcode.STORE, Opcode.LOAD_DEP: Opcode.LOAD}[Opcode(u.opcode)]
            regs = (u.reg_ops[0], 0)
            u = replace(u, opcode=op, dep_id=0, reg_ops=regs)
        keep_w.append(u)
        keep_t.append(tags[i])
        keep_s.append(strides[i])
        keep_f.append(flops[i])
    q.streams[vmc], q.tags[vmc], q.tag_strides[vmc], q.flops[vmc] = keep_w, keep_t, keep_s, keep_f
