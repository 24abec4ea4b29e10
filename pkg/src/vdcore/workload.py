"""Operator graphs: parsing, shape rules, decomposition catalogs and a dense
reference evaluator."""

from __future__ import annotations

import graphlib
import itertools
import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import yaml

from .isa import Opcode

ELEM_BYTES = 4
KINDS = ("MATVEC", "GEMM", "ATTENTION", "ROPE", "RMSNORM", "MLP", "EMBED", "ELEMWISE")
UNARY_FNS = ("silu", "relu", "neg", "copy")
BINARY_FNS = ("add", "mul")

COMPUTE_OPCODE = {
    "MATVEC": Opcode.MATVEC,
    "GEMM": Opcode.GEMM_TILE,
    "ATTENTION": Opcode.ATTN,
    "ROPE": Opcode.ROPE,
    "RMSNORM": Opcode.RMSNORM,
    "ELEMWISE": Opcode.ELEMWISE,
    "EMBED": Opcode.EMBED,
}
ELEMWISE_CODES = {name: i for i, name in enumerate(UNARY_FNS + BINARY_FNS)}


class WorkloadError(ValueError):
    pass


class SchemaError(WorkloadError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ShapeError(WorkloadError):
    pass


class CycleError(WorkloadError):
    def __init__(self, cycle: Sequence[str]):
        super().__init__("cycle: " + " -> ".join(cycle))
        self.cycle = list(cycle)


class UnsatisfiableError(WorkloadError):
    pass


@dataclass(frozen=True)
class TensorRef:
    name: str
    shape: tuple
    tile: tuple
    elem: str = "f32"
    init: Any = "normal"

    @property
    def grid(self) -> tuple:
        return tuple(s // t for s, t in zip(self.shape, self.tile))

    @property
    def tile_bytes(self) -> int:
        return math.prod(self.tile) * ELEM_BYTES

    @property
    def nbytes(self) -> int:
        return math.prod(self.shape) * ELEM_BYTES

    def tile_slice(self, coord: Sequence[int]) -> tuple:
        return tuple(slice(c * t, (c + 1) * t) for c, t in zip(coord, self.tile))


@dataclass(frozen=True)
class OperatorNode:
    id: str
    kind: str
    inputs: tuple
    outputs: tuple
    attrs: dict = field(default_factory=dict, hash=False, compare=True)


@dataclass
class OperatorGraph:
    tensors: dict            # name -> TensorRef, declaration order
    nodes: list              # OperatorNode in declaration order
    edges: list = field(default_factory=list)   # (producer id, consumer id, tensor)

    def node(self, node_id: str) -> OperatorNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def producer(self, tensor: str) -> OperatorNode | None:
        for n in self.nodes:
            if tensor in n.outputs:
                return n
        return None

    def consumers(self, tensor: str) -> list:
        return [n for n in self.nodes if tensor in n.inputs]

    @property
    def external_inputs(self) -> list:
        produced = {t for n in self.nodes for t in n.outputs}
        used = [t for n in self.nodes for t in n.inputs]
        return list(dict.fromkeys(t for t in used if t not in produced))

    @property
    def outputs(self) -> list:
        consumed = {t for n in self.nodes for t in n.inputs}
        return [t for n in self.nodes for t in n.outputs if t not in consumed]

    def topo_order(self) -> list:
        """Nodes in dependency order, lowest declaration index first among ready nodes."""
        index = {n.id: i for i, n in enumerate(self.nodes)}
        preds = {n.id: set() for n in self.nodes}
        for p, c, _ in self.edges:
            preds[c].add(p)
        done: set = set()
        order = []
        while len(order) < len(self.nodes):
            ready = [n for n in self.nodes if n.id not in done and preds[n.id] <= done]
            nxt = min(ready, key=lambda n: index[n.id])
            order.append(nxt)
            done.add(nxt.id)
        return order


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _tuple(path: str, value, length: int | None = None) -> tuple:
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) for v in value):
        raise SchemaError(path, f"expected a list of integers, got {value!r}")
    if length is not None and len(value) != length:
        raise SchemaError(path, f"expected {length} entries, got {len(value)}")
    return tuple(value)


def _parse_tensor(i: int, doc: dict) -> TensorRef:
    path = f"tensors[{i}]"
    if not isinstance(doc, dict):
        raise SchemaError(path, "expected a mapping")
    unknown = set(doc) - {"name", "shape", "tile", "elem", "init"}
    if unknown:
        raise SchemaError(path, f"unknown keys {sorted(unknown)}")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise SchemaError(f"{path}.name", "missing tensor name")
    shape = _tuple(f"{path}.shape", doc.get("shape"), 2)
    tile = _tuple(f"{path}.tile", doc.get("tile", list(shape)), 2)
    if min(shape) < 1 or min(tile) < 1:
        raise SchemaError(f"{path}.shape", "extents must be >= 1")
    if any(s % t for s, t in zip(shape, tile)):
        raise SchemaError(f"{path}.tile", f"tile {tile} does not divide shape {shape}")
    elem = doc.get("elem", "f32")
    if elem != "f32":
        raise SchemaError(f"{path}.elem", "only f32 is supported")
    return TensorRef(name, shape, tile, elem, doc.get("init", "normal"))


def _parse_node(i: int, doc: dict) -> OperatorNode:
    path = f"operators[{i}]"
    if not isinstance(doc, dict):
        raise SchemaError(path, "expected a mapping")
    unknown = set(doc) - {"id", "kind", "inputs", "outputs", "attrs"}
    if unknown:
        raise SchemaError(path, f"unknown keys {sorted(unknown)}")
    nid = doc.get("id")
    if not isinstance(nid, str) or not nid:
        raise SchemaError(f"{path}.id", "missing operator id")
    kind = doc.get("kind")
    if kind not in KINDS:
        raise SchemaError(f"{path}.kind", f"unknown kind {kind!r}")
    for key in ("inputs", "outputs"):
        v = doc.get(key)
        if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
            raise SchemaError(f"{path}.{key}", "expected a list of tensor names")
    attrs = doc.get("attrs") or {}
    if not isinstance(attrs, dict):
        raise SchemaError(f"{path}.attrs", "expected a mapping")
    return OperatorNode(nid, kind, tuple(doc["inputs"]), tuple(doc["outputs"]), dict(attrs))


def _expand_mlp(node: OperatorNode, tensors: dict) -> list[OperatorNode]:
    if len(node.inputs) != 3 or len(node.outputs) != 1:
        raise ShapeError(f"{node.id}: MLP takes (x, w_up, w_down) -> y")
    x, w1, w2 = (tensors[t] for t in node.inputs)
    hid = f"{node.id}.h"
    act = f"{node.id}.a"
    hshape = (x.shape[0], w1.shape[1])
    htile = (x.tile[0], w1.tile[1])
    for name in (hid, act):
        if name in tensors:
            raise ShapeError(f"{node.id}: intermediate name {name} already used")
        tensors[name] = TensorRef(name, hshape, htile, init="zeros")
    attrs = {k: v for k, v in node.attrs.items() if k != "act"}
    return [
        OperatorNode(f"{node.id}.up", "GEMM", (x.name, w1.name), (hid,), dict(attrs)),
        OperatorNode(f"{node.id}.act", "ELEMWISE", (hid,), (act,),
                     {**attrs, "fn": node.attrs.get("act", "silu")}),
        OperatorNode(f"{node.id}.down", "GEMM", (act, w2.name), node.outputs, dict(attrs)),
    ]


def build_graph(tensors: list[TensorRef], nodes: list[OperatorNode],
                declared_edges: list | None = None) -> OperatorGraph:
    tmap: dict = {}
    for t in tensors:
        if t.name in tmap:
            raise SchemaError("tensors", f"duplicate tensor {t.name!r}")
        tmap[t.name] = t
    expanded: list[OperatorNode] = []
    alias: dict = {}
    seen = set()
    for n in nodes:
        if n.id in seen:
            raise SchemaError("operators", f"duplicate operator id {n.id!r}")
        seen.add(n.id)
        for t in n.inputs + n.outputs:
            if t not in tmap:
                raise SchemaError(f"operators.{n.id}", f"unknown tensor {t!r}")
        sub = _expand_mlp(n, tmap) if n.kind == "MLP" else [n]
        alias[n.id] = {m.id for m in sub}
        expanded.extend(sub)

    producers: dict = {}
    for n in expanded:
        for t in n.outputs:
            if t in producers:
                raise ShapeError(f"tensor {t} produced by both {producers[t]} and {n.id}")
            producers[t] = n.id
    edges = sorted({(producers[t], n.id, t) for n in expanded for t in n.inputs if t in producers},
                   key=lambda e: ([m.id for m in expanded].index(e[1]), e[0], e[2]))
    if declared_edges is not None:
        for p, c, t in declared_edges:
            if not any(ep in alias.get(p, {p}) and ec in alias.get(c, {c}) and et == t
                       for ep, ec, et in edges):
                raise SchemaError("edges", f"edge {p} -> {c} ({t}) has no matching producer/consumer")
    sorter = graphlib.TopologicalSorter({n.id: set() for n in expanded})
    for p, c, _ in edges:
        sorter.add(c, p)
    try:
        sorter.prepare()
    except graphlib.CycleError as exc:
        raise CycleError(exc.args[1]) from None

    g = OperatorGraph(tmap, expanded, edges)
    for n in expanded:
        check_shapes(n, g)
    return g


def parse_workload(text: str) -> OperatorGraph:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError("<document>", f"not valid YAML: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise SchemaError("<document>", "top level must be a mapping")
    unknown = set(doc) - {"tensors", "operators", "edges", "name"}
    if unknown:
        raise SchemaError("<document>", f"unknown keys {sorted(unknown)}")
    tensors = [_parse_tensor(i, t) for i, t in enumerate(doc.get("tensors") or [])]
    nodes = [_parse_node(i, n) for i, n in enumerate(doc.get("operators") or [])]
    edges = doc.get("edges")
    if edges is not None:
        parsed = []
        for i, e in enumerate(edges):
            if not isinstance(e, dict) or set(e) != {"from", "to", "tensor"}:
                raise SchemaError(f"edges[{i}]", "expected {from, to, tensor}")
            parsed.append((e["from"], e["to"], e["tensor"]))
        edges = parsed
    return build_graph(tensors, nodes, edges)


def serialize(g: OperatorGraph) -> str:
    doc = {
        "tensors": [
            {"name": t.name, "shape": list(t.shape), "tile": list(t.tile), "elem": t.elem,
             "init": t.init}
            for t in g.tensors.values()
        ],
        "operators": [
            {"id": n.id, "kind": n.kind, "inputs": list(n.inputs), "outputs": list(n.outputs),
             "attrs": dict(n.attrs)}
            for n in g.nodes
        ],
        "edges": [{"from": p, "to": c, "tensor": t} for p, c, t in g.edges],
    }
    return yaml.safe_dump(doc, sort_keys=False)


# ---------------------------------------------------------------------------
# shape rules
# ---------------------------------------------------------------------------

def _edge_desc(g: OperatorGraph, n: OperatorNode, tensor: str) -> str:
    p = g.producer(tensor)
    return f"edge {p.id} -> {n.id} ({tensor})" if p else f"{n.id} input {tensor}"


def check_shapes(n: OperatorNode, g: OperatorGraph) -> None:
    T = [g.tensors[t] for t in n.inputs]
    O = [g.tensors[t] for t in n.outputs]

    def fail(tensor: str, msg: str):
        raise ShapeError(f"{_edge_desc(g, n, tensor)}: {msg}")

    def want(cond: bool, tensor: str, msg: str):
        if not cond:
            fail(tensor, msg)

    nin = {"MATVEC": 2, "GEMM": 2, "ATTENTION": 3, "ROPE": 2, "RMSNORM": 2, "EMBED": 1}
    if n.kind in nin and (len(T) != nin[n.kind] or len(O) != 1):
        raise ShapeError(f"{n.id}: {n.kind} takes {nin[n.kind]} inputs and 1 output")
    k = n.kind
    if k == "MATVEC":
        a, x = T
        y = O[0]
        want(x.shape == (a.shape[1], 1), x.name, f"expected ({a.shape[1]}x1), got {x.shape}")
        want(x.tile == (a.tile[1], 1), x.name, f"tile {x.tile} misaligned with {a.name} tile {a.tile}")
        want(y.shape == (a.shape[0], 1), y.name, f"expected output ({a.shape[0]}x1), got {y.shape}")
        want(y.tile == (a.tile[0], 1), y.name, f"output tile must be ({a.tile[0]}x1)")
    elif k == "GEMM":
        a, b = T
        c = O[0]
        want(b.shape[0] == a.shape[1], b.name, f"inner dims {a.shape} x {b.shape}")
        want(b.tile[0] == a.tile[1], b.name, f"K tiles differ: {a.tile} vs {b.tile}")
        want(c.shape == (a.shape[0], b.shape[1]), c.name, f"expected output {(a.shape[0], b.shape[1])}")
        want(c.tile == (a.tile[0], b.tile[1]), c.name, f"output tile must be {(a.tile[0], b.tile[1])}")
    elif k == "ATTENTION":
        q, kk, v = T
        o = O[0]
        heads = int(n.attrs.get("heads", 1))
        want(q.shape[1] % heads == 0, q.name, f"{q.shape[1]} columns not divisible by {heads} heads")
        d = q.shape[1] // heads
        for t in (kk, v):
            want(t.shape[1] == q.shape[1], t.name, f"head width mismatch with {q.name}")
            want(t.tile == (q.tile[0], d), t.name, f"tile must be ({q.tile[0]}x{d})")
            want(t.shape[0] == kk.shape[0], t.name, "K and V token counts differ")
        want(q.tile[1] == d, q.name, f"tile must cover exactly one head ({d} columns)")
        want(o.shape == q.shape and o.tile == q.tile, o.name, "output must match query shape and tile")
        if n.attrs.get("causal"):
            want(kk.shape[0] == q.shape[0], kk.name, "causal attention needs equal query/key lengths")
    elif k == "ROPE":
        x, t = T
        y = O[0]
        want(t.shape == x.shape and t.tile == x.tile, t.name, f"angles must match {x.name} shape and tile")
        want(y.shape == x.shape and y.tile == x.tile, y.name, "output must match input shape and tile")
        pairs_ok = x.tile[1] % 2 == 0 or (x.shape[1] == 1 and x.tile[0] % 2 == 0)
        want(pairs_ok, x.name, "rotation pairs would straddle tiles")
    elif k == "RMSNORM":
        x, w = T
        y = O[0]
        want(w.shape == (1, x.shape[1]), x.name,
             f"{x.name} {x.shape} does not match weight {w.name} {w.shape}")
        want(x.tile[1] == x.shape[1], x.name, "tiles must span whole rows")
        want(w.tile == w.shape, w.name, "weight must be a single tile")
        want(y.shape == x.shape and y.tile == x.tile, y.name,
             f"expected output {x.shape} tile {x.tile}, got {y.shape} tile {y.tile}")
    elif k == "ELEMWISE":
        fn = n.attrs.get("fn", "copy")
        arity = 1 if fn in UNARY_FNS else 2 if fn in BINARY_FNS else None
        if arity is None:
            raise ShapeError(f"{n.id}: unknown elementwise fn {fn!r}")
        if len(T) != arity or len(O) != 1:
            raise ShapeError(f"{n.id}: {fn} takes {arity} inputs and 1 output")
        for t in T + O:
            want(t.shape == T[0].shape and t.tile == T[0].tile, t.name,
                 f"expected shape {T[0].shape} tile {T[0].tile}")
    elif k == "EMBED":
        table = T[0]
        out = O[0]
        ids = n.attrs.get("ids")
        if not isinstance(ids, list) or len(ids) != out.shape[0]:
            raise ShapeError(f"{n.id}: attrs.ids must list {out.shape[0]} token ids")
        if any(not 0 <= i < table.shape[0] for i in ids):
            raise ShapeError(f"{n.id}: token id out of range for {table.name}")
        want(table.tile == (1, table.shape[1]), table.name, "table tiles must be single rows")
        want(out.shape[1] == table.shape[1] and out.tile[1] == table.shape[1], out.name,
             "output rows must match table width")
    else:  # pragma: no cover - MLP is expanded earlier
        raise ShapeError(f"{n.id}: unsupported kind {k}")


# ---------------------------------------------------------------------------
# work items and decompositions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkItem:
    """One compute µop: an output tile plus the input tiles it pops, in order."""

    node: str
    opcode: Opcode
    out: tuple                 # (tensor, coord)
    pre: tuple                 # tiles popped once before the loop
    iterations: tuple          # tuple of tuples of (tensor, coord)
    flops: float
    imm: int = 0
    axes: tuple = ()           # coordinate along each split axis

    @property
    def size(self) -> int:
        return len(self.iterations)

    @property
    def inputs(self) -> list:
        return list(self.pre) + [t for it in self.iterations for t in it]


def split_axes(n: OperatorNode, g: OperatorGraph) -> list[tuple[str, int]]:
    """(axis name, tile count) for every axis the operator may be split along."""
    out = g.tensors[n.outputs[0]]
    rows, cols = out.grid
    if n.kind in ("MATVEC", "RMSNORM", "EMBED"):
        return [("M", rows)]
    if n.kind == "ATTENTION":
        return [("head", cols), ("token", rows)]
    return [("M", rows), ("N", cols)]


def work_items(n: OperatorNode, g: OperatorGraph) -> list[WorkItem]:
    T = [g.tensors[t] for t in n.inputs]
    out = g.tensors[n.outputs[0]]
    rows, cols = out.grid
    items = []
    op = COMPUTE_OPCODE[n.kind]
    for i, j in itertools.product(range(rows), range(cols)):
        pre: tuple = ()
        imm = 0
        if n.kind == "MATVEC":
            a, x = T
            its = tuple(((x.name, (k, 0)), (a.name, (i, k))) for k in range(a.grid[1]))
            flops = 2 * a.tile[0] * a.tile[1] * len(its)
            axes = (i,)
        elif n.kind == "GEMM":
            a, b = T
            its = tuple(((a.name, (i, k)), (b.name, (k, j))) for k in range(a.grid[1]))
            flops = 2 * a.tile[0] * a.tile[1] * b.tile[1] * len(its)
            axes = (i, j)
        elif n.kind == "ATTENTION":
            q, kk, v = T
            nblocks = i + 1 if n.attrs.get("causal") else kk.grid[0]
            pre = ((q.name, (i, j)),)
            its = tuple(((kk.name, (b, j)), (v.name, (b, j))) for b in range(nblocks))
            tq, d = q.tile
            flops = (4 * tq * kk.tile[0] * d + 5 * tq * kk.tile[0]) * nblocks
            imm = 1 if n.attrs.get("causal") else 0
            axes = (j, i)
        elif n.kind == "ROPE":
            x, t = T
            its = (((t.name, (i, j)), (x.name, (i, j))),)
            flops = 6 * math.prod(x.tile)
            axes = (i, j)
        elif n.kind == "RMSNORM":
            x, w = T
            its = (((w.name, (0, 0)), (x.name, (i, 0))),)
            flops = 4 * math.prod(x.tile)
            imm = int(np.float32(n.attrs.get("eps", 1e-6)).view(np.int32))
            axes = (i,)
        elif n.kind == "ELEMWISE":
            its = (tuple((t.name, (i, j)) for t in T),)
            flops = 4 * math.prod(out.tile)
            imm = ELEMWISE_CODES[n.attrs.get("fn", "copy")]
            axes = (i, j)
        elif n.kind == "EMBED":
            table = T[0]
            ids = n.attrs["ids"]
            its = tuple(((table.name, (ids[r], 0)),) for r in range(i * out.tile[0], (i + 1) * out.tile[0]))
            flops = 0
            axes = (i,)
        else:  # pragma: no cover
            raise ShapeError(n.kind)
        items.append(WorkItem(n.id, op, (out.name, (i, j)), pre, its, float(flops), imm, axes))
    return items


@dataclass(frozen=True)
class TilingChoice:
    node: str
    splits: tuple              # ((axis, parts), ...)
    assignment: tuple          # pair index per work item, in work_items order

    @property
    def parts(self) -> int:
        return math.prod(p for _, p in self.splits)


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def _assign(items: list[WorkItem], axes: list, parts: tuple) -> tuple:
    out = []
    for it in items:
        idx = 0
        for (_, count), p, c in zip(axes, parts, it.axes):
            idx = idx * p + c // (count // p)
        out.append(idx)
    return tuple(out)


def decompositions(n: OperatorNode, g: OperatorGraph, hw) -> list[TilingChoice]:
    """Valid tilings for ``n`` on ``hw``, most parallel first.

    Each axis splits into a divisor of its tile count; the product of parts
    never exceeds the number of virtual core pairs. ``attrs.parts`` pins the
    total part count and ``attrs.pair`` shifts the placement by that many pairs.
    """
    for t in n.inputs + n.outputs:
        tb = g.tensors[t].tile_bytes
        if tb > hw.slot_size:
            raise UnsatisfiableError(
                f"{n.id}: tile of {t} is {tb} bytes, larger than the {hw.slot_size}-byte slot")
    axes = split_axes(n, g)
    items = work_items(n, g)
    pinned = n.attrs.get("parts")
    shift = int(n.attrs.get("pair", 0))
    choices = []
    for parts in itertools.product(*(_divisors(c) for _, c in axes)):
        total = math.prod(parts)
        if total > hw.pair_count:
            continue
        if pinned is not None and total != int(pinned):
            continue
        splits = tuple((name, p) for (name, _), p in zip(axes, parts))
        assignment = tuple((a + shift) % hw.pair_count for a in _assign(items, axes, parts))
        choices.append(TilingChoice(n.id, splits, assignment))
    if not choices:
        raise UnsatisfiableError(f"{n.id}: no decomposition fits {hw.pair_count} core pairs")
    # most parallel first; among equals prefer splitting the leading axis
    choices.sort(key=lambda c: (-c.parts, tuple(-p for _, p in c.splits)))
    return choices


# ---------------------------------------------------------------------------
# inputs and dense reference
# ---------------------------------------------------------------------------

def init_tensor(t: TensorRef, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(t.name.encode())])
    spec = t.init
    if isinstance(spec, list):
        arr = np.asarray(spec, dtype=np.float64).reshape(t.shape)
    elif spec == "zeros":
        arr = np.zeros(t.shape)
    elif spec == "ones":
        arr = np.ones(t.shape)
    elif spec == "uniform":
        arr = rng.uniform(-1.0, 1.0, t.shape)
    elif spec == "angles":
        arr = rng.uniform(-math.pi, math.pi, t.shape)
    elif spec == "normal":
        arr = rng.standard_normal(t.shape) / math.sqrt(t.shape[1] if t.shape[1] > 1 else t.shape[0])
    else:
        raise SchemaError(f"tensors.{t.name}.init", f"unknown init {spec!r}")
    return arr.astype(np.float32)


def init_inputs(g: OperatorGraph, seed: int = 0) -> dict:
    return {name: init_tensor(g.tensors[name], seed) for name in g.external_inputs}


def silu(x):
    return x / (1.0 + np.exp(-x))


def apply_elemwise(fn: str, *xs):
    if fn == "add":
        return xs[0] + xs[1]
    if fn == "mul":
        return xs[0] * xs[1]
    if fn == "silu":
        return silu(xs[0])
    if fn == "relu":
        return np.maximum(xs[0], 0.0)
    if fn == "neg":
        return -xs[0]
    if fn == "copy":
        return xs[0].copy()
    raise ShapeError(f"unknown elementwise fn {fn!r}")


def rope_apply(x, angles):
    flat = x.reshape(-1)
    ang = angles.reshape(-1)[0::2]
    even, odd = flat[0::2], flat[1::2]
    c, s = np.cos(ang), np.sin(ang)
    out = np.empty_like(flat)
    out[0::2] = even * c - odd * s
    out[1::2] = even * s + odd * c
    return out.reshape(x.shape)


def rmsnorm_apply(x, w, eps):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * w


def attention_dense(q, k, v, heads: int, causal: bool):
    s, width = q.shape
    d = width // heads
    out = np.empty_like(q)
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        scores = q[:, cols] @ k[:, cols].T / math.sqrt(d)
        if causal:
            scores = np.where(np.tril(np.ones_like(scores, dtype=bool)), scores, -np.inf)
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        out[:, cols] = (p / p.sum(axis=1, keepdims=True)) @ v[:, cols]
    return out


def evaluate(g: OperatorGraph, inputs: dict) -> dict:
    """Dense float64 evaluation of every tensor in the graph."""
    vals = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    for n in g.topo_order():
        x = [vals[t] for t in n.inputs]
        if n.kind in ("MATVEC", "GEMM"):
            y = x[0] @ x[1]
        elif n.kind == "ATTENTION":
            y = attention_dense(*x, int(n.attrs.get("heads", 1)), bool(n.attrs.get("causal")))
        elif n.kind == "ROPE":
            y = rope_apply(x[0], x[1])
        elif n.kind == "RMSNORM":
            eps = float(np.float32(n.attrs.get("eps", 1e-6)))
            y = rmsnorm_apply(x[0], x[1], eps)
        elif n.kind == "ELEMWISE":
            y = apply_elemwise(n.attrs.get("fn", "copy"), *x)
        elif n.kind == "EMBED":
            y = x[0][np.asarray(n.attrs["ids"])]
        else:  # pragma: no cover
            raise ShapeError(n.kind)
        vals[n.outputs[0]] = y
    return vals
