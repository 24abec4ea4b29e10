"""Compute handlers run by the virtual compute cores.

A handler is a generator ``fn(ctx, u)``. It yields events obtained from the
context: ``ctx.pop()`` for the next input tile, ``ctx.pop_out()`` for the
output slot, and ``ctx.compute(flops)`` to spend EU time. It calls
``ctx.recycle(entry)`` once an input is no longer needed and
``ctx.push(out, data)`` to hand the result back to the VMC. Arithmetic is done
in float64; slots hold float32 tiles.
"""

from __future__ import annotations

import math

import numpy as np

from ..isa import HandlerSpec, HandlerTable, OpClass, Opcode, UopWord
from ..workload import BINARY_FNS, ELEMWISE_CODES, apply_elemwise, rmsnorm_apply, rope_apply

_FN_BY_CODE = {v: k for k, v in ELEMWISE_CODES.items()}


def elemwise_arity(imm: int) -> int:
    return 2 if _FN_BY_CODE.get(imm) in BINARY_FNS else 1


def input_count(u: UopWord) -> int:
    """Number of input tiles a compute µop pops from its m2c channel."""
    op = Opcode(u.opcode)
    if op in (Opcode.MATVEC, Opcode.GEMM_TILE, Opcode.ROPE, Opcode.RMSNORM):
        return 2 * u.size
    if op == Opcode.ATTN:
        return 1 + 2 * u.size
    if op == Opcode.ELEMWISE:
        return elemwise_arity(u.imm) * u.size
    if op == Opcode.EMBED:
        return u.size
    raise ValueError(f"{op.name} is not a compute opcode")


def _f64(entry) -> np.ndarray:
    return np.asarray(entry.data, dtype=np.float64)


def matvec(ctx, u):
    acc = None
    for _ in range(u.size):
        x = yield ctx.pop()
        a = yield ctx.pop()
        part = _f64(a) @ _f64(x)
        acc = part if acc is None else acc + part
        yield ctx.compute(2 * a.data.size)
        ctx.recycle(x)
        ctx.recycle(a)
    out = yield ctx.pop_out()
    ctx.push(out, acc)


def gemm_tile(ctx, u):
    acc = None
    for _ in range(u.size):
        a = yield ctx.pop()
        b = yield ctx.pop()
        part = _f64(a) @ _f64(b)
        acc = part if acc is None else acc + part
        yield ctx.compute(2 * a.data.shape[0] * a.data.shape[1] * b.data.shape[1])
        ctx.recycle(a)
        ctx.recycle(b)
    out = yield ctx.pop_out()
    ctx.push(out, acc)


def attention(ctx, u):
    """Blockwise softmax attention for one (query block, head) with a running max."""
    causal = bool(u.imm)
    qe = yield ctx.pop()
    q = _f64(qe)
    tq, d = q.shape
    scale = 1.0 / math.sqrt(d)
    m = np.full((tq, 1), -np.inf)
    l = np.zeros((tq, 1))
    acc = np.zeros_like(q)
    for b in range(u.size):
        ke = yield ctx.pop()
        ve = yield ctx.pop()
        k, v = _f64(ke), _f64(ve)
        s = (q @ k.T) * scale
        if causal and b == u.size - 1:
            s = np.where(np.tril(np.ones((tq, k.shape[0]), dtype=bool)), s, -np.inf)
        m_new = np.maximum(m, s.max(axis=1, keepdims=True))
        p = np.exp(s - m_new)
        corr = np.exp(m - m_new)
        l = l * corr + p.sum(axis=1, keepdims=True)
        acc = acc * corr + p @ v
        m = m_new
        yield ctx.compute(4 * tq * k.shape[0] * d + 5 * tq * k.shape[0])
        ctx.recycle(ke)
        ctx.recycle(ve)
    ctx.recycle(qe)
    out = yield ctx.pop_out()
    ctx.push(out, acc / l)


def rope(ctx, u):
    res = []
    for _ in range(u.size):
        t = yield ctx.pop()
        x = yield ctx.pop()
        res.append(rope_apply(_f64(x), _f64(t)))
        yield ctx.compute(6 * x.data.size)
        ctx.recycle(t)
        ctx.recycle(x)
    out = yield ctx.pop_out()
    ctx.push(out, res[-1])


def rmsnorm(ctx, u):
    eps = float(np.int32(u.imm).view(np.float32))
    res = None
    for _ in range(u.size):
        w = yield ctx.pop()
        x = yield ctx.pop()
        res = rmsnorm_apply(_f64(x), _f64(w), eps)
        yield ctx.compute(4 * x.data.size)
        ctx.recycle(w)
        ctx.recycle(x)
    out = yield ctx.pop_out()
    ctx.push(out, res)


def elemwise(ctx, u):
    fn = _FN_BY_CODE[u.imm]
    res = None
    for _ in range(u.size):
        xs = []
        for _ in range(elemwise_arity(u.imm)):
            xs.append((yield ctx.pop()))
        res = apply_elemwise(fn, *[_f64(x) for x in xs])
        yield ctx.compute(4 * xs[0].data.size)
        for x in xs:
            ctx.recycle(x)
    out = yield ctx.pop_out()
    ctx.push(out, res)


def embed(ctx, u):
    rows = []
    for _ in range(u.size):
        r = yield ctx.pop()
        rows.append(_f64(r).reshape(-1))
        ctx.recycle(r)
    out = yield ctx.pop_out()
    yield ctx.compute(0)
    ctx.push(out, np.stack(rows))


def default_handlers() -> HandlerTable:
    table = HandlerTable()
    for op, fn in [(Opcode.MATVEC, matvec), (Opcode.GEMM_TILE, gemm_tile), (Opcode.ATTN, attention),
                   (Opcode.ROPE, rope), (Opcode.RMSNORM, rmsnorm), (Opcode.ELEMWISE, elemwise),
                   (Opcode.EMBED, embed)]:
        table.register(op, HandlerSpec(fn, OpClass.COMPUTE, pops_m2c=True, pushes_c2m=True))
    return table
