"""Execution reports and their on-disk forms."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Span:
    """One executed µop: where, what and when."""

    agent: str        # e.g. "vmc0.ldu1" or "vcc0.1"
    sm: int
    name: str         # opcode mnemonic
    start: int
    end: int
    seq: int          # issue order on the agent
    index: int        # static µop index in its stream
    flow: int
    tag: int
    nbytes: int = 0
    pos: int = 0      # position in the core's unrolled stream

    def to_list(self) -> list:
        return [self.agent, self.sm, self.name, self.start, self.end, self.seq, self.index,
                self.flow, self.tag, self.nbytes, self.pos]


@dataclass
class ExecutionReport:
    status: str                       # "completed", "deadlock" or "fault"
    makespan: int
    profile: str
    workload_id: str
    program_id: str
    bandwidth: float                  # DRAM bytes per ns
    bytes_read: int = 0
    bytes_written: int = 0
    local_bytes: int = 0
    spans: list = field(default_factory=list)
    dram: list = field(default_factory=list)      # (t0, t1, bytes moved)
    wait_for: list = field(default_factory=list)  # [(agent, reason, waits_on)] forming a cycle
    blocked: dict = field(default_factory=dict)
    leftovers: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    fault: str = ""                               # diagnostic when a handler halted the run
    tensors: dict = field(default_factory=dict)   # name -> array, kept out of the JSON form

    @property
    def completed(self) -> bool:
        return self.status == "completed"

    @property
    def traffic(self) -> int:
        return self.bytes_read + self.bytes_written

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "makespan": self.makespan,
            "profile": self.profile,
            "workload_id": self.workload_id,
            "program_id": self.program_id,
            "bandwidth": self.bandwidth,
            "bytes_read": self.bytes_read,
            "bytes_written": self.bytes_written,
            "local_bytes": self.local_bytes,
            "spans": [s.to_list() for s in self.spans],
            "dram": [list(d) for d in self.dram],
            "wait_for": [list(w) for w in self.wait_for],
            "blocked": dict(self.blocked),
            "leftovers": dict(self.leftovers),
            "options": dict(self.options),
            "fault": self.fault,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutionReport":
        return cls(
            status=d["status"], makespan=d["makespan"], profile=d["profile"],
            workload_id=d["workload_id"], program_id=d["program_id"], bandwidth=d["bandwidth"],
            bytes_read=d["bytes_read"], bytes_written=d["bytes_written"],
            local_bytes=d["local_bytes"], spans=[Span(*s) for s in d["spans"]],
            dram=[tuple(x) for x in d["dram"]], wait_for=[tuple(w) for w in d["wait_for"]],
            blocked=d["blocked"], leftovers=d["leftovers"], options=d.get("options", {}), fault=d.get("fault", ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def summary(self) -> str:
        lines = [
            f"status: {self.status}",
            f"makespan_ns: {self.makespan}",
            f"profile: {self.profile}",
            f"bytes_read: {self.bytes_read}",
            f"bytes_written: {self.bytes_written}",
            f"global_traffic: {self.traffic}",
            f"local_bytes: {self.local_bytes}",
            f"uops_executed: {len(self.spans)}",
        ]
        if self.fault:
            lines.append(f"fault: {self.fault}")
        if self.wait_for:
            lines.append("wait_for_cycle:")
            for agent, reason, target in self.wait_for:
                lines.append(f"  {agent} waits for {target} ({reason})")
        return "\n".join(lines) + "\n"

    def chrome_trace(self) -> list:
        events = []
        for sm in sorted({s.sm for s in self.spans}):
            events.append({"name": "process_name", "ph": "M", "pid": sm, "tid": 0,
                           "args": {"name": f"SM {sm}"}})
        for s in sorted(self.spans, key=lambda s: (s.start, s.agent, s.seq)):
            events.append({
                "name": s.name, "cat": s.agent.split(".")[-1].rstrip("0123456789") or "vcc",
                "ph": "X", "ts": s.start / 1000.0, "dur": (s.end - s.start) / 1000.0,
                "pid": s.sm, "tid": s.agent,
                "args": {"index": s.index, "pos": s.pos, "flow": s.flow, "tag": s.tag,
                         "bytes": s.nbytes},
            })
        return events

    def write(self, out: Path, trace: bool = True) -> list[Path]:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        (out / "report.json").write_text(self.to_json() + "\n")
        (out / "report.txt").write_text(self.summary())
        written += [out / "report.json", out / "report.txt"]
        if trace:
            path = out / "trace.json"
            path.write_text(json.dumps(self.chrome_trace(), sort_keys=True) + "\n")
            written.append(path)
        tdir = out / "tensors"
        for name in sorted(self.tensors):
            tdir.mkdir(exist_ok=True)
            path = tdir / f"{name}.npy"
            with open(path, "wb") as fh:
                np.save(fh, np.asarray(self.tensors[name]), allow_pickle=False)
            written.append(path)
        return written


def load_report(path: str | Path) -> ExecutionReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return ExecutionReport.from_dict(json.loads(path.read_text()))
