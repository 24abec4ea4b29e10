"""Utilization timelines, traffic accounting and A/B comparison of reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .machine.report import ExecutionReport

BUCKETS = 200


class MetricsError(ValueError):
    pass


@dataclass
class UtilizationTimeline:
    resource: str
    buckets: list = field(default_factory=list)   # (start, end, busy fraction)

    @property
    def mean(self) -> float:
        total = sum(e - s for s, e, _ in self.buckets)
        return sum((e - s) * f for s, e, f in self.buckets) / total if total else 0.0

    def fraction_at(self, t: float) -> float:
        for s, e, f in self.buckets:
            if s <= t < e:
                return f
        return self.buckets[-1][2] if self.buckets else 0.0


def default_bucket(makespan: int) -> int:
    return max(1, math.ceil(makespan / BUCKETS))


def _edges(makespan: int, width: int) -> list[tuple[int, int]]:
    n = max(1, math.ceil(makespan / width))
    return [(i * width, min((i + 1) * width, makespan)) for i in range(n) if i * width < makespan] \
        or [(0, max(makespan, 1))]


def _spread(intervals, edges) -> list[float]:
    """Distribute (start, end, amount) uniformly over time and sum per bucket."""
    out = [0.0] * len(edges)
    width = edges[0][1] - edges[0][0] if edges else 1
    for s, e, amount in intervals:
        if amount == 0:
            continue
        if e <= s:
            k = min(int(s // width), len(edges) - 1)
            out[k] += amount
            continue
        rate = amount / (e - s)
        k = min(int(s // width), len(edges) - 1)
        while k < len(edges) and edges[k][0] < e:
            lo, hi = max(s, edges[k][0]), min(e, edges[k][1])
            if k == len(edges) - 1:
                hi = e
            if hi > lo:
                out[k] += rate * (hi - lo)
            k += 1
    return out


def _union(spans) -> list[tuple[int, int, int]]:
    merged = []
    for s, e in sorted(spans):
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e, e - s) for s, e in merged]


def utilization(report: ExecutionReport, bucket: int | None = None) -> list[UtilizationTimeline]:
    """Busy fraction per resource per bucket.

    DRAM: bytes moved in the bucket over what the full bandwidth could move.
    Units and compute cores: fraction of the bucket covered by their µops.
    """
    if not report.completed:
        raise MetricsError(f"report status is {report.status}; utilization needs a completed run")
    width = int(bucket) if bucket else default_bucket(report.makespan)
    if width < 1:
        raise MetricsError("bucket width must be at least 1 ns")
    edges = _edges(report.makespan, width)
    out = []
    moved = _spread(report.dram, edges)
    out.append(UtilizationTimeline("dram", [
        (s, e, min(1.0, m / (report.bandwidth * (e - s))) if e > s else 0.0)
        for (s, e), m in zip(edges, moved)]))
    by_agent: dict = {}
    for sp in report.spans:
        by_agent.setdefault(sp.agent, []).append((sp.start, sp.end))
    for agent in sorted(by_agent):
        busy = _spread(_union(by_agent[agent]), edges)
        out.append(UtilizationTimeline(agent, [
            (s, e, min(1.0, b / (e - s)) if e > s else 0.0) for (s, e), b in zip(edges, busy)]))
    return out


def dram_bytes(timeline: UtilizationTimeline, bandwidth: float) -> float:
    return sum(f * (e - s) * bandwidth for s, e, f in timeline.buckets)


def timelines_csv(timelines: list[UtilizationTimeline]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["resource", "start", "end", "fraction"])
    for tl in timelines:
        for s, e, f in tl.buckets:
            w.writerow([tl.resource, s, e, f"{f:.6f}"])
    return buf.getvalue()


@dataclass
class Comparison:
    makespan_a: int
    makespan_b: int
    makespan_ratio: float
    traffic_delta: int
    local_delta: int
    utilization_delta: dict

    def text(self) -> str:
        lines = [
            f"makespan_a: {self.makespan_a}",
            f"makespan_b: {self.makespan_b}",
            f"makespan_ratio: {self.makespan_ratio:.6f}",
            f"traffic_delta: {self.traffic_delta}",
            f"local_delta: {self.local_delta}",
        ]
        for r in sorted(self.utilization_delta):
            lines.append(f"utilization_delta.{r}: {self.utilization_delta[r]:+.6f}")
        return "\n".join(lines) + "\n"


def _mean_utilization(report: ExecutionReport) -> dict:
    span = max(report.makespan, 1)
    out = {"dram": sum(m for _, _, m in report.dram) / (report.bandwidth * span)}
    by_agent: dict = {}
    for sp in report.spans:
        by_agent.setdefault(sp.agent, []).append((sp.start, sp.end))
    for agent, spans in by_agent.items():
        out[agent] = sum(b for _, _, b in _union(spans)) / span
    return out


def compare(a: ExecutionReport, b: ExecutionReport) -> Comparison:
    """A relative to B: makespan ratio a/b, traffic a-b, mean utilization a-b."""
    if a.workload_id != b.workload_id:
        raise MetricsError(f"reports are for different workloads ({a.workload_id} vs {b.workload_id})")
    if a.profile != b.profile:
        raise MetricsError(f"reports use different profiles ({a.profile} vs {b.profile})")
    if not (a.completed and b.completed):
        raise MetricsError("both reports must be completed runs")
    ua, ub = _mean_utilization(a), _mean_utilization(b)
    return Comparison(
        makespan_a=a.makespan,
        makespan_b=b.makespan,
        makespan_ratio=a.makespan / b.makespan if b.makespan else 1.0,
        traffic_delta=a.traffic - b.traffic,
        local_delta=a.local_bytes - b.local_bytes,
        utilization_delta={r: ua.get(r, 0.0) - ub.get(r, 0.0) for r in sorted(set(ua) | set(ub))},
    )
