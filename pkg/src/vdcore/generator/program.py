"""The lowered program: per-core µop streams plus queue wiring and metadata."""

from __future__ import annotations

import bisect
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..costmodel import HardwareProfile, profile_from_dict
from ..isa import (DEP_CONSUMERS, DEP_PRODUCERS, Coord, DescriptorIndex, Opcode, UopWord,
                   format_stream, parse_stream, unfold, validate_stream)
from ..workload import TensorRef

DEFAULT_QUEUE_DEPTH = 4


class LoweringError(ValueError):
    pass


@dataclass(frozen=True)
class QueueEntry:
    dep_id: int
    producer: str
    consumer: str
    depth: int = DEFAULT_QUEUE_DEPTH
    local: bool = False


def vmc_name(sm: int) -> str:
    return f"vmc{sm}"


def vcc_name(sm: int, lane: int) -> str:
    return f"vcc{sm}.{lane}"


def parse_core(name: str) -> tuple[str, int, int]:
    """("vmc"|"vcc", sm, lane) for a core id."""
    if name.startswith("vmc"):
        return "vmc", int(name[3:]), 0
    sm, lane = name[3:].split(".")
    return "vcc", int(sm), int(lane)


@dataclass
class LoweredProgram:
    hw: HardwareProfile
    tensors: list                      # TensorRef, index = tensor id in addresses
    streams: dict                      # core id -> list[UopWord]
    tags: dict                         # core id -> operator index per static µop (-1: control)
    queues: dict = field(default_factory=dict)       # dep_id -> QueueEntry
    ops: list = field(default_factory=list)          # operator ids, index = tag
    outputs: list = field(default_factory=list)      # tensor names kept in global memory
    tag_strides: dict = field(default_factory=dict)  # core id -> tag advance per loop iteration
    flops: dict = field(default_factory=dict)        # core id -> FLOPs per static µop
    baseline_order: dict = field(default_factory=dict)
    barrier: bool = False

    # -- basic accessors --------------------------------------------------

    @property
    def slot_budget(self) -> int:
        return self.hw.slot_count

    @property
    def descriptors(self) -> dict:
        """tensor id -> (base byte offset, (row stride, col stride))."""
        out = {}
        base = 0
        for i, t in enumerate(self.tensors):
            out[i] = (base, (t.shape[1] * 4, 4))
            base += t.nbytes
        return out

    # -- tile descriptors ----------------------------------------------------
    # Descriptor addresses number every tile of every tensor consecutively, so
    # equally shaped tensors declared in the same order differ by a constant
    # stride; loop folding relies on this.

    def _tile_bases(self) -> list[int]:
        bases, total = [], 0
        for t in self.tensors:
            bases.append(total)
            total += math.prod(t.grid)
        bases.append(total)
        return bases

    def tile_index(self, tensor: int, coord: tuple) -> int:
        t = self.tensors[tensor]
        flat = 0
        for c, g in zip(coord, t.grid):
            flat = flat * g + c
        return self._tile_bases()[tensor] + flat

    def tile_coord(self, index: int) -> Coord:
        bases = self._tile_bases()
        if not 0 <= index < bases[-1]:
            raise IndexError(f"descriptor {index} outside 0..{bases[-1] - 1}")
        tensor = bisect.bisect_right(bases, index) - 1
        flat = index - bases[tensor]
        coord = []
        for g in reversed(self.tensors[tensor].grid):
            coord.append(flat % g)
            flat //= g
        return Coord(tensor, tuple(reversed(coord)))

    def canonical(self, u: UopWord) -> UopWord:
        """Resolve descriptor addresses to tile coordinates."""
        if isinstance(u.address, DescriptorIndex):
            return replace(u, address=self.tile_coord(u.address.index))
        return u

    def tensor_id(self, name: str) -> int:
        for i, t in enumerate(self.tensors):
            if t.name == name:
                return i
        raise KeyError(name)

    def vmcs(self) -> list[str]:
        return [c for c in self.streams if c.startswith("vmc")]

    def vccs(self) -> list[str]:
        return [c for c in self.streams if c.startswith("vcc")]

    def copy(self) -> "LoweredProgram":
        return LoweredProgram(
            hw=self.hw,
            tensors=list(self.tensors),
            streams={k: list(v) for k, v in self.streams.items()},
            tags={k: list(v) for k, v in self.tags.items()},
            queues=dict(self.queues),
            ops=list(self.ops),
            outputs=list(self.outputs),
            tag_strides={k: list(v) for k, v in self.tag_strides.items()},
            flops={k: list(v) for k, v in self.flops.items()},
            baseline_order={k: tuple(v) for k, v in self.baseline_order.items()},
            barrier=self.barrier,
        )

    def strides_for(self, core: str) -> list:
        return self.tag_strides.get(core) or [0] * len(self.streams[core])

    def flops_for(self, core: str) -> list:
        return self.flops.get(core) or [0.0] * len(self.streams[core])

    def is_folded(self) -> bool:
        return any(u.opcode == Opcode.LOOP for s in self.streams.values() for u in s)

    # -- dynamic views ------------------------------------------------------

    def instances(self, core: str) -> list[tuple[int, UopWord, int]]:
        """(static index, resolved word, operator tag) in execution order."""
        tags = self.tags[core]
        strides = self.strides_for(core)
        seen: dict[int, int] = {}
        out = []
        for idx, u in unfold(self.streams[core]):
            k = seen.get(idx, 0)
            seen[idx] = k + 1
            out.append((idx, self.canonical(u), tags[idx] + k * strides[idx]))
        return out

    def issue_sequence(self, core: str) -> list[tuple[int, UopWord, int, bool]]:
        """Like ``instances`` but including executed control µops, flagged True."""
        tags = self.tags[core]
        strides = self.strides_for(core)
        seen: dict[int, int] = {}
        out = []
        for idx, u in unfold(self.streams[core], include_control=True):
            if u.opcode >= Opcode.LOOP:
                out.append((idx, u, -1, True))
                continue
            k = seen.get(idx, 0)
            seen[idx] = k + 1
            out.append((idx, self.canonical(u), tags[idx] + k * strides[idx], False))
        return out

    def workload_id(self) -> str:
        h = hashlib.sha256()
        for t in self.tensors:
            h.update(repr((t.name, t.shape, t.tile)).encode())
        h.update(repr(self.ops).encode())
        return h.hexdigest()[:16]

    def uop_work(self, u: UopWord) -> tuple[int, float]:
        """(global bytes, FLOPs) for a resolved memory µop; compute FLOPs come from ``flops``."""
        if u.opcode in (Opcode.LOAD, Opcode.LOAD_DEP, Opcode.STORE, Opcode.STORE_DEP) and u.address is not None:
            return self.tensors[u.address.tensor].tile_bytes * u.size, 0.0
        return 0, 0.0

    def global_traffic(self) -> int:
        """Bytes of non-local LOAD/STORE traffic the program will move."""
        total = 0
        for core in self.vmcs():
            for _, u, _ in self.instances(core):
                total += self.uop_work(u)[0]
        return total

    # -- validation ------------------------------------------------------------

    def violations(self) -> list[str]:
        grids = {i: t.grid for i, t in enumerate(self.tensors)}
        problems = []
        for core, s in self.streams.items():
            kind = "vmc" if core.startswith("vmc") else "vcc"
            problems += [f"{core}: {v}" for v in validate_stream(s, kind, None, grids, match_deps=False)]
            if len(self.tags[core]) != len(s):
                problems.append(f"{core}: tag list length mismatch")
        seen: dict[int, list] = {}
        for core in self.vmcs():
            for _, u, _ in self.instances(core):
                if u.dep_id:
                    role = "p" if u.opcode in DEP_PRODUCERS else "c" if u.opcode in DEP_CONSUMERS else "?"
                    seen.setdefault(u.dep_id, []).append((role, core))
        for d in sorted(seen):
            prods = [c for r, c in seen[d] if r == "p"]
            cons = [c for r, c in seen[d] if r == "c"]
            if cons and not prods:
                problems.append(f"dep {d}: consumer has no matching producer")
            if len(prods) > 1:
                problems.append(f"dep {d}: multiple inter-memory deps into one consumer ({len(prods)} producers)")
            if len(cons) > 1:
                problems.append(f"dep {d}: consumed {len(cons)} times")
            q = self.queues.get(d)
            if q is None:
                problems.append(f"dep {d}: not in queue table")
            elif prods != [q.producer] or cons != [q.consumer]:
                problems.append(f"queue {d}: expected {q.producer}->{q.consumer}, found {prods}->{cons}")
        for d in self.queues:
            if d not in seen:
                problems.append(f"queue {d}: no producer or consumer in any stream")
        return problems

    def check(self) -> None:
        problems = self.violations()
        if problems:
            raise LoweringError("; ".join(problems[:10]))

    # -- serialization -----------------------------------------------------

    def assembly(self) -> dict[str, str]:
        return {core: format_stream(s) for core, s in self.streams.items()}

    def queue_table_text(self) -> str:
        lines = ["# dep_id producer consumer depth kind"]
        for d in sorted(self.queues):
            q = self.queues[d]
            lines.append(f"{d} {q.producer} {q.consumer} {q.depth} {'local' if q.local else 'global'}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for core in sorted(self.streams):
            h.update(core.encode())
            h.update(format_stream(self.streams[core]).encode())
            h.update(json.dumps(self.tags[core]).encode())
        h.update(self.queue_table_text().encode())
        h.update(b"barrier" if self.barrier else b"")
        return h.hexdigest()


def parse_queue_table(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        d, prod, cons, depth, kind = line.split()
        out[int(d)] = QueueEntry(int(d), prod, cons, int(depth), kind == "local")
    return out


def program_from_assembly(hw: HardwareProfile, tensors: list, texts: dict, queue_text: str,
                          outputs: list | None = None) -> LoweredProgram:
    """Rebuild a (hand-written) program from assembly text; every µop is tagged 0."""
    streams = {core: parse_stream(t) for core, t in texts.items()}
    return LoweredProgram(
        hw=hw, tensors=list(tensors), streams=streams,
        tags={c: [0] * len(s) for c, s in streams.items()},
        queues=parse_queue_table(queue_text), ops=["asm"], outputs=list(outputs or []),
    )


# ---------------------------------------------------------------------------
# on-disk form: one assembly file per core, a queue table and a JSON manifest
# ---------------------------------------------------------------------------

MANIFEST = "program.json"
QUEUES = "queues.txt"


def save_program(p: LoweredProgram, out) -> list:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for core, text in p.assembly().items():
        path = out / f"{core}.uasm"
        path.write_text(text)
        written.append(path)
    (out / QUEUES).write_text(p.queue_table_text())
    manifest = {
        "profile": p.hw.to_dict(),
        "tensors": [{"name": t.name, "shape": list(t.shape), "tile": list(t.tile), "init": t.init}
                    for t in p.tensors],
        "outputs": list(p.outputs),
        "ops": list(p.ops),
        "barrier": p.barrier,
        "cores": {core: {"tags": p.tags[core], "tag_strides": p.strides_for(core),
                         "flops": p.flops_for(core)} for core in p.streams},
        "baseline_order": {k: list(v) for k, v in p.baseline_order.items()},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    written += [out / QUEUES, out / MANIFEST]
    return written


def load_program(src) -> LoweredProgram:
    """Read a program directory written by ``save_program`` (or assembled by hand).

    Per-core metadata in the manifest is optional; missing tags default to 0.
    """
    src = Path(src)
    manifest = json.loads((src / MANIFEST).read_text())
    hw = profile_from_dict(manifest["profile"])
    tensors = [TensorRef(t["name"], tuple(t["shape"]), tuple(t["tile"]), init=t.get("init", "normal"))
               for t in manifest["tensors"]]
    texts = {path.stem: path.read_text() for path in sorted(src.glob("*.uasm"))}
    queue_text = (src / QUEUES).read_text() if (src / QUEUES).exists() else ""
    p = program_from_assembly(hw, tensors, texts, queue_text, manifest.get("outputs"))
    p.ops = manifest.get("ops", p.ops)
    p.barrier = bool(manifest.get("barrier", False))
    for core, meta in manifest.get("cores", {}).items():
        if core in p.streams:
            p.tags[core] = list(meta.get("tags", p.tags[core]))
            p.tag_strides[core] = list(meta.get("tag_strides", [0] * len(p.streams[core])))
            p.flops[core] = list(meta.get("flops", [0.0] * len(p.streams[core])))
    p.baseline_order = {k: tuple(v) for k, v in manifest.get("baseline_order", {}).items()}
    return p
