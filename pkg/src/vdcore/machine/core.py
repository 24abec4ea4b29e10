"""The simulated machine: VMCs (CFU + LDUs + STUs), VCCs and shared DRAM.

Each SM hosts one VMC and ``vcc_per_sm`` VCCs. A VMC's CFU walks its stream
in order, allocating slots at issue (in-order allocation), and dispatches
memory µops to load/store units by flow. Units run µops out of order with
respect to each other but retire their own µops in issue order; a µop may
start only once the previous µop of its flow has completed. VCCs run their
compute µops in order through the registered handlers.
"""

from __future__ import annotations

import math
from collections import deque

import networkx as nx
import numpy as np

from ..costmodel import compute_ns
from ..generator.program import LoweredProgram, parse_core, vcc_name, vmc_name
from ..isa import LOADS, STORES, Flag, HandlerTable, Opcode
from ..workload import init_tensor
from .alloc import SlotAllocator
from .engine import Engine, Event
from .handlers import default_handlers
from .report import ExecutionReport, Span

_EPS = 1e-6


class BuildError(ValueError):
    """The program does not fit the machine it was handed."""


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

class _Entry:
    """A slot travelling on an m2c channel (input tile or output slot)."""

    __slots__ = ("ready", "result", "slot", "n", "data", "op", "lane", "kind")

    def __init__(self, engine, op, slot, n, lane, kind, ready=False):
        self.ready = engine.event()
        if ready:
            self.ready.triggered = True
        self.result = engine.event() if kind == "out" else None
        self.slot = slot
        self.n = n
        self.data = None
        self.op = op
        self.lane = lane
        self.kind = kind


class _Channel:
    """FIFO whose consumer may only take the head once it is ready."""

    def __init__(self, engine: Engine):
        self.engine = engine
        self.items: deque = deque()
        self.getters: deque = deque()
        self._armed = None

    def put(self, item) -> None:
        self.items.append(item)
        self._match()

    def get(self) -> Event:
        ev = self.engine.event()
        self.getters.append(ev)
        self._match()
        return ev

    def _match(self, _ev=None) -> None:
        while self.getters and self.items:
            head = self.items[0]
            if not head.ready.triggered:
                if self._armed is not head:
                    self._armed = head
                    head.ready.on(self._match)
                return
            self.items.popleft()
            self.getters.popleft().succeed(head)


class _MemOp:
    __slots__ = ("u", "idx", "tag", "sm", "seq", "unit", "slot", "n", "entry", "out", "pred",
                 "done", "start", "nbytes", "data", "holder", "token", "pos")

    def __init__(self, engine, u, idx, tag, sm):
        self.u = u
        self.idx = idx
        self.tag = tag
        self.sm = sm
        self.seq = 0
        self.unit = None
        self.slot = None
        self.n = 0
        self.entry = None
        self.out = None
        self.pred = None
        self.done = engine.event()
        self.start = 0
        self.nbytes = 0
        self.data = None
        self.holder = ""       # agent currently responsible for the µop
        self.token = None      # local entry taken by the flow dispatcher
        self.pos = 0


class _Unit:
    """A load/store unit, or a flow's dispatcher; both are in-order queues."""

    def __init__(self, name: str, sm: int):
        self.name = name
        self.sm = sm
        self.queue: deque = deque()
        self.wake: Event | None = None
        self.issued = 0
        self.last: _MemOp | None = None


def _wake(unit: _Unit) -> None:
    if unit.wake is not None and not unit.wake.triggered:
        unit.wake.succeed()


class _Dram:
    """Processor sharing: active VMCs split bandwidth equally, transfers split their VMC's share."""

    def __init__(self, engine: Engine, bytes_per_ns: float):
        self.engine = engine
        self.bw = bytes_per_ns
        self.active: dict = {}     # id -> [sm, remaining, callback]
        self.rates: dict = {}
        self.last = 0
        self.version = 0
        self.next_id = 0
        self.segments: list = []

    def start(self, sm: int, nbytes: int, cb) -> None:
        if nbytes <= 0:
            self.engine.schedule(0, cb)
            return
        self._advance()
        self.next_id += 1
        self.active[self.next_id] = [sm, float(nbytes), cb]
        self._reschedule()

    def _advance(self) -> None:
        now = self.engine.now
        dt = now - self.last
        if dt > 0 and self.active:
            moved = 0.0
            for tid, rec in self.active.items():
                m = min(rec[1], self.rates[tid] * dt)
                rec[1] -= m
                moved += m
            self.segments.append((self.last, now, moved))
        self.last = now

    def _reschedule(self) -> None:
        self.version += 1
        if not self.active:
            return
        per_sm: dict = {}
        for rec in self.active.values():
            per_sm[rec[0]] = per_sm.get(rec[0], 0) + 1
        share = self.bw / len(per_sm)
        self.rates = {tid: share / per_sm[rec[0]] for tid, rec in self.active.items()}
        dt = min(math.ceil(rec[1] / self.rates[tid] - 1e-9) for tid, rec in self.active.items())
        self.engine.schedule(max(1, dt), self._tick, self.version)

    def _tick(self, version: int) -> None:
        if version != self.version:
            return
        self._advance()
        done = [tid for tid, rec in self.active.items() if rec[1] <= _EPS]
        for tid in done:
            cb = self.active.pop(tid)[2]
            self.engine.schedule(0, cb)
        self._reschedule()


# ---------------------------------------------------------------------------
# machine
# ---------------------------------------------------------------------------

class Machine:
    def __init__(self, program: LoweredProgram, inputs: dict | None = None, seed: int = 0,
                 handlers: HandlerTable | None = None):
        self.p = program
        self.hw = hw = program.hw
        for core in program.streams:
            kind, sm, lane = parse_core(core)
            if sm >= hw.sm_count or lane >= hw.vcc_per_sm:
                raise BuildError(f"core {core} does not exist on {hw.name} "
                                 f"({hw.sm_count} SMs x {hw.vcc_per_sm} compute cores)")
        self.engine = Engine()
        self.handlers = handlers or default_handlers()
        self.memory = []
        for t in program.tensors:
            if inputs is not None and t.name in inputs:
                arr = np.asarray(inputs[t.name], dtype=np.float32).reshape(t.shape)
            else:
                arr = init_tensor(t, seed).astype(np.float32)
            self.memory.append(arr.copy())
        self.alloc = {}
        self.alloc_waiters: dict = {}
        self.in_chan: dict = {}
        self.out_chan: dict = {}
        self.ldus: dict = {}
        self.stus: dict = {}
        self.flows: dict = {}          # (sm, flow) -> dispatcher
        self.pending: dict = {}        # sm -> µops issued but not yet dispatched
        self.cfu_done: dict = {}
        self.tokens: dict = {}
        self.token_waiters: dict = {}
        self.local: dict = {}
        self.local_waiters: dict = {}
        self.producer_op: dict = {}
        self.flow_last: dict = {}
        self.reason: dict = {}
        self.spans: list = []
        self.fault: str = ""
        self.bytes_read = 0
        self.bytes_written = 0
        self.local_bytes = 0
        self.dram = _Dram(self.engine, hw.bytes_per_ns)
        self.slot_holders: dict = {}
        self._init_barrier()

        for core in program.streams:
            kind, sm, lane = parse_core(core)
            if kind == "vmc":
                self._build_vmc(core, sm)
        for core in program.streams:
            kind, sm, lane = parse_core(core)
            if kind == "vcc":
                self._chan(sm, lane)
                self.engine.process(self._vcc(core, sm, lane), core)

    # -- construction --------------------------------------------------------

    def _chan(self, sm, lane):
        key = (sm, lane)
        if key not in self.in_chan:
            self.in_chan[key] = _Channel(self.engine)
            self.out_chan[key] = _Channel(self.engine)
        return self.in_chan[key], self.out_chan[key]

    def _build_vmc(self, core, sm):
        hw = self.hw
        self.alloc[sm] = SlotAllocator(hw.slot_count)
        self.alloc_waiters[sm] = []
        self.slot_holders[sm] = {}
        self.ldus[sm] = [_Unit(f"{core}.ldu{i}", sm) for i in range(hw.ldu_count)]
        self.stus[sm] = [_Unit(f"{core}.stu{i}", sm) for i in range(hw.stu_count)]
        self.cfu_done[sm] = False
        self.pending[sm] = 0
        self.engine.process(self._cfu(core, sm), f"{core}.cfu")
        for unit in self.ldus[sm] + self.stus[sm]:
            self.engine.process(self._unit(unit), unit.name)

    def _init_barrier(self):
        self.barrier = self.p.barrier
        self.tag_left: dict = {}
        self.gates: dict = {}
        if not self.barrier:
            return
        for core in self.p.streams:
            for _, u, tag in self.p.instances(core):
                self.tag_left[tag] = self.tag_left.get(tag, 0) + 1
        self.tag_order = sorted(self.tag_left)
        for t in self.tag_order:
            self.gates[t] = self.engine.event()
        self._gate_ptr = 0
        self._open_gates()

    def _open_gates(self):
        # gate[t] opens once every smaller tag has fully completed
        while self._gate_ptr < len(self.tag_order):
            t = self.tag_order[self._gate_ptr]
            if not self.gates[t].triggered:
                self.gates[t].succeed()
            if self.tag_left[t] > 0:
                return
            self._gate_ptr += 1

    def _tag_done(self, tag):
        if self.barrier:
            self.tag_left[tag] -= 1
            if self.tag_left[tag] == 0:
                self._open_gates()

    def _wait_gate(self, agent, tag):
        if self.barrier and tag in self.gates and not self.gates[tag].triggered:
            self.reason[agent] = ("barrier", tag)
            return self.gates[tag]
        return None

    # -- slots ------------------------------------------------------------------

    def _free(self, sm, slot, n):
        self.alloc[sm].free(slot, n)
        self.slot_holders[sm].pop(slot, None)
        waiters, self.alloc_waiters[sm] = self.alloc_waiters[sm], []
        for ev in waiters:
            ev.succeed()

    def _tile(self, u):
        t = self.p.tensors[u.address.tensor]
        return t, t.tile_slice(u.address.coord)

    # -- VMC control-flow unit ---------------------------------------------------

    def _cfu(self, core, sm):
        eng, hw = self.engine, self.hw
        agent = f"{core}.cfu"
        ldus, stus = self.ldus[sm], self.stus[sm]
        alloc = self.alloc[sm]
        stack = []
        pos = -1
        for idx, u, tag, ctl in self.p.issue_sequence(core):
            pos += not ctl
            gate = None if ctl else self._wait_gate(agent, tag)
            if gate is not None:
                yield gate
            self.reason[agent] = ("issue",)
            yield eng.timeout(hw.issue_ns)
            if ctl:
                continue
            op = u.opcode
            flags = Flag(u.flags)
            if op == Opcode.FREE:
                if stack:
                    s, n = stack.pop()
                    self._free(sm, s, n)
                self._tag_done(tag)
                continue
            m = _MemOp(eng, u, idx, tag, sm)
            m.pos = pos
            need = 0
            if op == Opcode.ALLOC or (op in (Opcode.LOAD, Opcode.LOAD_DEP)) or \
                    (op in STORES and Flag.RECV in flags):
                need = max(u.size, 1)
            if need:
                while True:
                    start = alloc.try_alloc(need)
                    if start is not None:
                        break
                    self.reason[agent] = ("alloc", need)
                    ev = eng.event()
                    self.alloc_waiters[sm].append(ev)
                    yield ev
                m.slot, m.n = start, need
                self.slot_holders[sm][start] = m
            if op == Opcode.ALLOC:
                stack.append((start, need))
                self._tag_done(tag)
                continue
            lane = u.lane
            if op in LOADS and Flag.SEND in flags:
                m.entry = _Entry(eng, m, m.slot, m.n, lane, "in")
                self._chan(sm, lane)[0].put(m.entry)
            if op in STORES and Flag.RECV in flags:
                m.out = _Entry(eng, m, m.slot, m.n, lane, "out", ready=True)
                self._chan(sm, lane)[1].put(m.out)
            if u.dep_id and op in STORES:
                self.producer_op[u.dep_id] = m
            key = (sm, u.flow)
            m.pred = self.flow_last.get(key)
            self.flow_last[key] = m
            units = ldus if op in LOADS else stus
            m.unit = units[u.flow % len(units)]
            disp = self.flows.get(key)
            if disp is None:
                disp = self.flows[key] = _Unit(f"{core}.flow{u.flow}", sm)
                eng.process(self._dispatch(disp), disp.name)
            m.holder = disp.name
            self.pending[sm] += 1
            disp.queue.append(m)
            _wake(disp)
        self.cfu_done[sm] = True
        self.reason[agent] = ("done",)
        for (fsm, _), disp in self.flows.items():
            if fsm == sm:
                _wake(disp)
        for unit in ldus + stus:
            _wake(unit)

    # -- load/store units --------------------------------------------------------

    def _wait_token(self, table, waiters, dep, agent, kind):
        if table.get(dep):
            return None
        self.reason[agent] = (kind, dep)
        ev = self.engine.event()
        waiters.setdefault(dep, []).append(ev)
        return ev

    def _push(self, table, waiters, dep, value):
        if table is self.tokens:
            table[dep] = table.get(dep, 0) + 1
        else:
            table.setdefault(dep, deque()).append(value)
        for ev in waiters.pop(dep, []):
            ev.succeed()

    def _dispatch(self, disp: _Unit):
        """Hand a flow's µops to their unit in stream order, each once it is ready to run."""
        agent = disp.name
        sm = disp.sm
        while True:
            if not disp.queue:
                if self.cfu_done[sm]:
                    self.reason[agent] = ("done",)
                    return
                self.reason[agent] = ("idle",)
                disp.wake = self.engine.event()
                yield disp.wake
                continue
            m = disp.queue[0]
            u = m.u
            op = u.opcode
            if m.pred is not None and not m.pred.done.triggered:
                self.reason[agent] = ("flow", m.pred)
                yield m.pred.done
            if op == Opcode.LOAD_DEP:
                ev = self._wait_token(self.tokens, self.token_waiters, u.dep_id, agent, "dep")
                if ev is not None:
                    yield ev
                self.tokens[u.dep_id] -= 1
                if not self.tokens[u.dep_id]:
                    del self.tokens[u.dep_id]
            elif op == Opcode.LOAD_LOCAL:
                ev = self._wait_token(self.local, self.local_waiters, u.dep_id, agent, "local")
                if ev is not None:
                    yield ev
                m.token = self.local[u.dep_id].popleft()
                if not self.local[u.dep_id]:
                    del self.local[u.dep_id]
            elif op in STORES and m.out is not None and not m.out.result.triggered:
                self.reason[agent] = ("result", m.out)
                yield m.out.result
            disp.queue.popleft()
            unit = m.unit
            m.holder = unit.name
            m.seq = unit.issued
            unit.issued += 1
            unit.queue.append(m)
            self.pending[sm] -= 1
            _wake(unit)
            if self.cfu_done[sm] and not self.pending[sm]:
                for other in self.ldus[sm] + self.stus[sm]:
                    _wake(other)

    def _unit(self, unit: _Unit):
        eng, hw = self.engine, self.hw
        agent = unit.name
        while True:
            if not unit.queue:
                if self.cfu_done[unit.sm] and not self.pending[unit.sm]:
                    self.reason[agent] = ("done",)
                    return
                self.reason[agent] = ("idle",)
                unit.wake = eng.event()
                yield unit.wake
                continue
            m = unit.queue.popleft()
            u = m.u
            op = u.opcode
            if op in (Opcode.LOAD_DEP, Opcode.LOAD_LOCAL) or (op in STORES and u.dep_id):
                self.reason[agent] = ("queue",)
                yield eng.timeout(hw.queue_op_ns)
            if op == Opcode.LOAD_LOCAL:
                m.data = m.token
            self.reason[agent] = ("transfer",)
            m.start = eng.now
            nbytes = 0
            if op in (Opcode.LOAD, Opcode.LOAD_DEP, Opcode.STORE, Opcode.STORE_DEP) and u.address is not None:
                t, sl = self._tile(u)
                nbytes = t.tile_bytes * u.size
                if op in (Opcode.LOAD, Opcode.LOAD_DEP):
                    m.data = self.memory[u.address.tensor][sl].copy()
            m.nbytes = nbytes
            prev = unit.last
            unit.last = m
            self.dram.start(unit.sm, nbytes, self._xfer_cb(m, prev))

    def _xfer_cb(self, m, prev):
        def cb():
            if prev is None or prev.done.triggered:
                self._retire(m)
            else:
                prev.done.on(lambda _e: self._retire(m))
        return cb

    def _retire(self, m: _MemOp):
        u = m.u
        op = u.opcode
        sm = m.sm
        if op in (Opcode.LOAD, Opcode.LOAD_DEP):
            self.bytes_read += m.nbytes
            if m.entry is not None:
                m.entry.data = m.data
                m.entry.ready.succeed()
            else:
                self._free(sm, m.slot, m.n)
        elif op == Opcode.LOAD_LOCAL:
            src = m.data
            self.local_bytes += src.data.nbytes if src.data is not None else 0
            if m.entry is not None:
                m.entry.slot, m.entry.n, m.entry.data = src.slot, src.n, src.data
                self.slot_holders[src.op.sm][src.slot] = m
                m.entry.ready.succeed()
            else:
                self._free(src.op.sm, src.slot, src.n)
        elif op == Opcode.STORE_LOCAL:
            if m.out is not None:
                self._push(self.local, self.local_waiters, u.dep_id, m.out)
        elif op in (Opcode.STORE, Opcode.STORE_DEP):
            self.bytes_written += m.nbytes
            if m.out is not None:
                if u.address is not None and m.out.data is not None:
                    t, sl = self._tile(u)
                    self.memory[u.address.tensor][sl] = m.out.data.reshape(t.tile)
                self._free(sm, m.slot, m.n)
            if op == Opcode.STORE_DEP:
                self._push(self.tokens, self.token_waiters, u.dep_id, None)
        m.done.succeed()
        self._tag_done(m.tag)
        self.spans.append(Span(m.unit.name, sm, Opcode(op).name, m.start, self.engine.now, m.seq,
                               m.idx, u.flow, m.tag, m.nbytes, m.pos))

    # -- virtual compute cores ---------------------------------------------------

    def _vcc(self, core, sm, lane):
        eng, hw = self.engine, self.hw
        ctx = _LaneCtx(self, core, sm, lane)
        seq = 0
        for idx, u, tag, ctl in self.p.issue_sequence(core):
            gate = None if ctl else self._wait_gate(core, tag)
            if gate is not None:
                yield gate
            self.reason[core] = ("issue",)
            yield eng.timeout(hw.issue_ns)
            if ctl:
                continue
            start = eng.now
            gen = self.handlers[u.opcode].fn(ctx, u)
            value = None
            while True:
                try:
                    ev = gen.send(value)
                except StopIteration:
                    break
                value = yield ev
                data = getattr(value, "data", None)
                if data is not None and not np.isfinite(data).all():
                    self.fault = (f"{core}: {Opcode(u.opcode).name} (uop {idx}) popped a non-finite "
                                  f"input at t={eng.now}")
                    eng.halt()
                    return
            self.reason[core] = ("issue",)
            self._tag_done(tag)
            self.spans.append(Span(core, sm, Opcode(u.opcode).name, start, eng.now, seq, idx,
                                   u.flow, tag, 0, seq))
            seq += 1
        self.reason[core] = ("done",)

    # -- running -----------------------------------------------------------------

    def run(self, until: int | None = None) -> ExecutionReport:
        self.engine.run(until)
        return self.report()

    def step(self) -> bool:
        return self.engine.step()

    def report(self) -> ExecutionReport:
        p = self.p
        blocked = [pr for pr in self.engine.blocked()]
        status = "fault" if self.fault else "completed" if not blocked else "deadlock"
        makespan = max((s.end for s in self.spans), default=0)
        names = {i: t.name for i, t in enumerate(p.tensors)}
        produced = set()
        for core in p.vmcs():
            for _, u, _ in p.instances(core):
                if u.opcode in (Opcode.STORE, Opcode.STORE_DEP) and u.address is not None and u.size:
                    produced.add(u.address.tensor)
        rep = ExecutionReport(
            status=status, makespan=makespan, profile=self.hw.name,
            workload_id=p.workload_id(), program_id=p.fingerprint()[:16],
            bandwidth=self.hw.bytes_per_ns, bytes_read=self.bytes_read,
            bytes_written=self.bytes_written, local_bytes=self.local_bytes,
            spans=sorted(self.spans, key=lambda s: (s.start, s.end, s.agent, s.seq)),
            dram=list(self.dram.segments),
            leftovers={
                "dep_tokens": sum(self.tokens.values()),
                "local_entries": sum(len(q) for q in self.local.values()),
                "slots_in_use": sum(a.used for a in self.alloc.values()),
            },
            options={"barrier": p.barrier},
            tensors={names[i]: self.memory[i].copy() for i in sorted(produced)},
        )
        if self.fault:
            rep.fault = self.fault
        elif blocked:
            rep.blocked = {pr.name: _describe(self.reason.get(pr.name, ("?",))) for pr in blocked}
            rep.wait_for = self.wait_for_cycle()
        return rep

    # -- deadlock analysis ---------------------------------------------------------

    def _holder_agent(self, m: _MemOp) -> str:
        """Agent that must act before memory µop ``m`` can finish (and release what it holds)."""
        return m.holder or f"{vmc_name(m.sm)}.cfu"

    def _slot_releaser(self, m: _MemOp) -> str:
        u = m.u
        if u.opcode in LOADS:
            if m.entry is not None and m.entry.ready.triggered:
                return vcc_name(m.sm, u.lane)
            return self._holder_agent(m)
        if m.out is not None and not m.out.result.triggered:
            return vcc_name(m.sm, u.lane)
        if u.opcode == Opcode.STORE_LOCAL and m.done.triggered:
            cons = self._consumer_agent(u.dep_id, m.sm)
            return cons
        return self._holder_agent(m)

    def _consumer_agent(self, dep, sm):
        q = self.p.queues.get(dep)
        vmc = q.consumer if q else vmc_name(sm)
        _, csm, _ = parse_core(vmc)
        for (fsm, _), disp in sorted(self.flows.items()):
            if fsm == csm and any(m.u.dep_id == dep for m in disp.queue):
                return disp.name
        return f"{vmc}.cfu"

    def _producer_agent(self, dep):
        m = self.producer_op.get(dep)
        if m is not None:
            return self._holder_agent(m)
        q = self.p.queues.get(dep)
        return f"{q.producer}.cfu" if q else "unknown"

    def wait_for_graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        blocked = {pr.name for pr in self.engine.blocked()}
        for agent in sorted(blocked):
            r = self.reason.get(agent, ("?",))
            kind = r[0]
            targets = []
            if kind == "alloc":
                sm = parse_core(agent.split(".")[0])[1]
                for slot in sorted(self.slot_holders[sm]):
                    targets.append(self._slot_releaser(self.slot_holders[sm][slot]))
            elif kind == "pop":
                chan = r[1]
                if chan.items:
                    targets.append(self._holder_agent(chan.items[0].op))
                else:
                    targets.append(f"{vmc_name(r[2])}.cfu")
            elif kind == "pop_out":
                targets.append(f"{vmc_name(r[2])}.cfu")
            elif kind in ("dep", "local"):
                targets.append(self._producer_agent(r[1]))
            elif kind == "result":
                targets.append(vcc_name(r[1].op.sm, r[1].lane))
            elif kind == "flow":
                targets.append(self._holder_agent(r[1]))
            elif kind == "idle":
                core = agent.split(".")[0]
                targets.append(f"{core}.cfu")
                if ".flow" not in agent:
                    targets += sorted(d.name for (fsm, _), d in self.flows.items()
                                      if d.name.startswith(core + "."))
            elif kind == "barrier":
                targets += [b for b in sorted(blocked) if b != agent
                            and self.reason.get(b, ("?",))[0] != "barrier"]
            for t in targets:
                if t in blocked:
                    g.add_edge(agent, t, reason=_describe(r))
        return g

    def wait_for_cycle(self) -> list:
        g = self.wait_for_graph()
        for start in sorted(g.nodes):
            try:
                cyc = nx.find_cycle(g, source=start)
            except nx.NetworkXNoCycle:
                continue
            return [(a, g.edges[a, b]["reason"], b) for a, b in cyc]
        return []


def _describe(r: tuple) -> str:
    kind = r[0]
    if kind == "alloc":
        return f"alloc {r[1]} slot(s)"
    if kind in ("dep", "local"):
        return f"{kind} queue {r[1]}"
    if kind == "flow":
        return f"flow {r[1].u.flow} predecessor"
    if kind == "pop":
        return "m2c input"
    if kind == "pop_out":
        return "m2c output slot"
    if kind == "result":
        return "compute result"
    if kind == "barrier":
        return f"barrier before operator {r[1]}"
    return kind


class _LaneCtx:
    """What a handler sees: its lane's channels, the EU and the c2m path."""

    def __init__(self, machine: Machine, core: str, sm: int, lane: int):
        self.m = machine
        self.core = core
        self.sm = sm
        self.lane = lane
        self.in_chan, self.out_chan = machine._chan(sm, lane)

    def pop(self) -> Event:
        self.m.reason[self.core] = ("pop", self.in_chan, self.sm)
        return self.in_chan.get()

    def pop_out(self) -> Event:
        self.m.reason[self.core] = ("pop_out", self.out_chan, self.sm)
        return self.out_chan.get()

    def compute(self, flops: float) -> Event:
        self.m.reason[self.core] = ("compute",)
        return self.m.engine.timeout(compute_ns(flops, self.m.hw))

    def recycle(self, entry: _Entry) -> None:
        self.m._free(self.sm, entry.slot, entry.n)

    def push(self, out: _Entry, data) -> None:
        out.data = np.asarray(data, dtype=np.float32)
        out.result.succeed()


def run(program: LoweredProgram, inputs: dict | None = None, seed: int = 0,
        handlers: HandlerTable | None = None) -> ExecutionReport:
    """Simulate ``program`` to completion (or deadlock) and return the report."""
    return Machine(program, inputs, seed, handlers).run()


def barrierize(program: LoweredProgram) -> LoweredProgram:
    """Kernel-per-operator ablation: no µop starts before every earlier operator finished."""
    q = program.copy()
    q.barrier = True
    return q
