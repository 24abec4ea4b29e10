"""Choosing a decomposition per operator with a critical-path heuristic."""

from __future__ import annotations

from dataclasses import dataclass

from ..costmodel import HardwareProfile, compute_ns, transfer_ns
from ..workload import OperatorGraph, WorkItem, decompositions, work_items

MIN_GAIN = 0.01


@dataclass
class TilingEstimate:
    critical_path: float
    total: float
    max_pair: float
    path: list            # [(node id, item index), ...] along the critical path

    @property
    def makespan(self) -> float:
        return max(self.critical_path, self.max_pair)


def item_cost(it: WorkItem, g: OperatorGraph, hw: HardwareProfile, produced: set,
              active_vmcs: int = 1) -> float:
    """Serial cost of one work item: its loads, its compute and its store.

    The control unit issues ahead while earlier µops transfer, so an item
    costs whichever is longer: issuing its memory µops, or moving its tiles
    and computing.
    """
    busy = 0.0
    for name, _ in it.inputs:
        busy += transfer_ns(g.tensors[name].tile_bytes, hw, active_vmcs)
        if name in produced:
            busy += hw.queue_op_ns
    busy += compute_ns(it.flops, hw)
    busy += transfer_ns(g.tensors[it.out[0]].tile_bytes, hw, active_vmcs)
    return float(max(hw.issue_ns * (len(it.inputs) + 1), busy))


def estimate(g: OperatorGraph, tilings: dict, hw: HardwareProfile) -> TilingEstimate:
    """Critical path and per-pair load of the tile-level task graph.

    Items on one pair run back to back, so the path follows either a tile
    dependency or the previous item on the same pair, whichever ends later.
    """
    produced = {t for n in g.nodes for t in n.outputs}
    finish: dict = {}      # tile -> (finish time, item key)
    pair_free: dict = {}   # pair -> (finish time, item key)
    best_path: dict = {}
    load: dict = {}
    total = 0.0
    cp, cp_key = 0.0, None
    for n in g.topo_order():
        choice = tilings[n.id]
        active = len({hw.pair_location(p)[0] for p in choice.assignment})
        for k, (it, pair) in enumerate(zip(work_items(n, g), choice.assignment)):
            c = item_cost(it, g, hw, produced, active)
            start, pred = pair_free.get(pair, (0.0, None))
            for tile in it.inputs:
                if tile in finish and finish[tile][0] > start:
                    start, pred = finish[tile]
            key = (n.id, k)
            end = start + c
            best_path[key] = (pred, c)
            finish[tuple(it.out)] = (end, key)
            pair_free[pair] = (end, key)
            load[pair] = load.get(pair, 0.0) + c
            total += c
            if end > cp:
                cp, cp_key = end, key
    path = []
    while cp_key is not None:
        path.append(cp_key)
        cp_key = best_path[cp_key][0]
    path.reverse()
    return TilingEstimate(cp, total, max(load.values(), default=0.0), path)


def _shape_key(n, g: OperatorGraph) -> tuple:
    """Operators with equal keys have identical decomposition catalogs."""
    def sig(names):
        return tuple((g.tensors[t].shape, g.tensors[t].tile) for t in names)
    return (n.kind, sig(n.inputs), sig(n.outputs), tuple(sorted((k, repr(v)) for k, v in n.attrs.items())))


def select_tilings(g: OperatorGraph, hw: HardwareProfile, theta: float = 1.2,
                   trace: list | None = None) -> dict:
    """Start from the coarsest decomposition of every operator and refine
    operators on a dominant critical path.

    A path is dominant when it exceeds ``theta`` times the average per-pair
    cost. The costliest operator on it (lowest declaration index on ties) moves
    to its next finer decomposition; if that gains 1% or less, the next
    costliest is tried instead. Refinement stops when no path dominates or no
    operator on the path gains more than 1%.

    Operators of the same kind, shapes and attributes move together, so
    repeated layers keep one decomposition and their streams stay periodic.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    group: dict = {}
    members: dict = {}
    for n in g.nodes:
        key = _shape_key(n, g)
        group[n.id] = members.setdefault(key, n.id)   # first member names the group
    catalog = {n.id: list(reversed(decompositions(n, g, hw))) for n in g.nodes}
    level = {gid: 0 for gid in dict.fromkeys(group.values())}
    order = {n.id: i for i, n in enumerate(g.nodes)}
    produced = {t for n in g.nodes for t in n.outputs}

    def current():
        return {nid: catalog[nid][level[group[nid]]] for nid in group}

    est = estimate(g, current(), hw)
    while True:
        avg = est.total / hw.pair_count
        if est.critical_path <= theta * avg:
            break
        cost_on_path: dict = {}
        for nid, k in est.path:
            it = work_items(g.node(nid), g)[k]
            gid = group[nid]
            cost_on_path[gid] = cost_on_path.get(gid, 0.0) + item_cost(it, g, hw, produced)
        cands = [gid for gid in cost_on_path if level[gid] + 1 < len(catalog[gid])]
        cands.sort(key=lambda gid: (-cost_on_path[gid], order[gid]))
        trial = None
        for target in cands:
            level[target] += 1
            trial = estimate(g, current(), hw)
            if trial.makespan < est.makespan * (1 - MIN_GAIN):
                break
            level[target] -= 1
            trial = None
        if trial is None:
            break
        if trace is not None:
            trace.append((target, catalog[target][level[target]].splits, trial.makespan))
        est = trial
    return current()
